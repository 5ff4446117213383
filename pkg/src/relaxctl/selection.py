"""Markovian selection among optimal relaxed rules on the controlled chain.

Optimal rules are described node by node: at each (i, x) the actions (atoms,
plus "stop" in stopping modes) attaining the Bellman maximum. The set of
optimal per-node kernels is the product of the simplices over those tie sets;
its vertices are the deterministic rules. Selection shrinks the tie sets
round by round, keeping at every node only the actions that maximize
E[phi_n(t_n, X_{t_n})] within the current set.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Mode, Problem, test_function
from .dpp import (
    TIE_TOL,
    TransitionModel,
    ValueFunction,
    continuation_values,
    evaluate_rule,
    stopping_values,
)

MAX_STEPS, MAX_NODES, MAX_ATOMS = 6, 9, 3
VERTEX_CHECK_CAP = 4096


class SizeError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteRule:
    """Per-node relaxed kernels ``kernels[i, x, k]`` and stop probabilities ``stop[i, x]``."""

    kernels: np.ndarray
    stop: Optional[np.ndarray] = None
    start: int = 0

    def __post_init__(self):
        if np.any(self.kernels < 0) or not np.allclose(self.kernels.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("kernels must be probability vectors")
        if self.stop is not None and (np.any(self.stop < 0) or np.any(self.stop > 1)):
            raise ValueError("stop probabilities must lie in [0, 1]")

    def at(self, i: int, history: tuple):
        x = history[-1]
        return self.kernels[i, x], 0.0 if self.stop is None else float(self.stop[i, x])


@dataclass(frozen=True)
class HistoryRule:
    """Rule whose kernel may depend on the whole node history; ``fn(i, history) -> (kernel, stop_prob)``."""

    fn: Callable
    start: int = 0

    def at(self, i: int, history: tuple):
        k, s = self.fn(i, history)
        return np.asarray(k, dtype=float), float(s)


@dataclass
class RuleSet:
    """All per-node kernels supported on the tie sets ``mask[i, x, a]`` (convex by construction)."""

    problem: Problem
    tm: TransitionModel
    mask: np.ndarray
    value: float
    start: int
    convex: bool = True
    max_value_gap: float = 0.0
    n_checked: int = 0

    @property
    def n_actions(self) -> int:
        return self.mask.shape[2]

    def vertex_count(self) -> int:
        return math.prod(int(c) for c in self.mask.sum(axis=2).ravel())

    def vertices(self, limit: Optional[int] = None):
        """Deterministic rules in lexicographic order of per-node choices (lowest action first)."""
        n, N, A = self.mask.shape
        choices = [np.flatnonzero(self.mask[i, x]) for i in range(n) for x in range(N)]
        for j, combo in enumerate(itertools.product(*choices)):
            if limit is not None and j >= limit:
                return
            yield self._rule(np.asarray(combo).reshape(n, N))

    def _rule(self, actions: np.ndarray) -> DiscreteRule:
        n, N = actions.shape
        K = self.problem.controls.K
        ker = np.zeros((n, N, K))
        stop = np.zeros((n, N)) if self.problem.stops else None
        is_stop = actions == K
        ker[np.arange(n)[:, None], np.arange(N)[None, :], np.where(is_stop, 0, actions)] = 1.0
        if stop is not None:
            stop[is_stop] = 1.0
        return DiscreteRule(ker, stop, self.start)

    def first(self) -> DiscreteRule:
        return self._rule(np.argmax(self.mask, axis=2))

    def __len__(self):
        return self.vertex_count()


def _check_size(problem: Problem):
    n, N, K = problem.grid.n_steps, problem.lattice.n_nodes, problem.controls.K
    if n > MAX_STEPS or N > MAX_NODES or K > MAX_ATOMS:
        raise SizeError(f"instance {n} steps x {N} nodes x {K} atoms exceeds {MAX_STEPS} x {MAX_NODES} x {MAX_ATOMS}")


def rule_value(problem: Problem, tm: TransitionModel, rule: DiscreteRule) -> np.ndarray:
    return evaluate_rule(problem, tm, rule.kernels, rule.stop)


def enumerate_optimal_rules(problem: Problem, tm: TransitionModel, v: ValueFunction, tol: float = TIE_TOL,
                            start: Optional[int] = None) -> RuleSet:
    """Tie sets of the Bellman maximum at every node, and a value check of the vertex rules."""
    _check_size(problem)
    n, N, K = problem.grid.n_steps, problem.lattice.n_nodes, problem.controls.K
    start = problem.x0_node if start is None else start
    A = K + (1 if problem.stops else 0)
    mask = np.zeros((n, N, A), dtype=bool)
    play = [0] if problem.mode == Mode.STOP else list(range(K))
    vals = v.values
    for i in range(n):
        q = continuation_values(problem, tm, i, vals[i + 1])
        for row, k in enumerate(play):
            mask[i, :, k] = q[row] >= vals[i] - tol
        if problem.stops:
            mask[i, :, K] = stopping_values(problem, i) >= vals[i] - tol
    if not np.all(mask.any(axis=2)):
        raise ValueError("value function is not attained at some node; was it produced by backward_induction?")
    rs = RuleSet(problem, tm, mask, float(vals[0, start]), start)
    gap = 0.0
    count = 0
    for rule in _spread_vertices(rs, VERTEX_CHECK_CAP):
        gap = max(gap, abs(float(rule_value(problem, tm, rule)[0, start]) - rs.value))
        count += 1
    rs.max_value_gap, rs.n_checked = gap, count
    return rs


def _spread_vertices(rs: RuleSet, cap: int):
    total = rs.vertex_count()
    if total <= cap:
        yield from rs.vertices()
        return
    rng = np.random.default_rng(0)
    n, N, A = rs.mask.shape
    choices = [np.flatnonzero(rs.mask[i, x]) for i in range(n) for x in range(N)]
    yield rs.first()
    for _ in range(cap - 1):
        yield rs._rule(np.array([rng.choice(c) for c in choices]).reshape(n, N))


@dataclass(frozen=True)
class SelectionOrder:
    """Sequence of (time index, functional phi(t, x[N, d]) -> [N]) pairs."""

    items: tuple

    def __len__(self):
        return len(self.items)

    def __getitem__(self, j):
        return self.items[j]


def _bisection_times(n: int) -> list:
    """1..n ordered coarse to fine: n, n/2, n/4, 3n/4, ..."""
    out, seen = [], set()
    level = 1
    while len(out) < n:
        for j in range(1, 2 ** level, 2) if level > 1 else (1,):
            t = int(round(n * j / 2 ** (level - 1))) if level > 1 else n
            if 1 <= t <= n and t not in seen:
                seen.add(t)
                out.append(t)
        level += 1
        if level > 64:
            break
    out.extend(t for t in range(1, n + 1) if t not in seen)
    return out


def default_order(problem: Problem, n_rounds: int = 64) -> SelectionOrder:
    """Diagonal enumeration of (time, test function) pairs; constants are skipped."""
    times = _bisection_times(problem.grid.n_steps)
    d = problem.dim
    items = []
    s = 2
    while len(items) < n_rounds:
        for a in range(1, s):
            b = s - a
            if a > len(times):
                continue
            f = test_function(b + 1, d)
            items.append((times[a - 1], (lambda t, x, f=f: f.value(x)), f.name))
            if len(items) == n_rounds:
                break
        s += 1
    return SelectionOrder(tuple(items))


@dataclass
class Selection:
    rule: DiscreteRule
    ruleset: RuleSet
    trace: list = field(default_factory=list)

    def trace_json(self) -> str:
        return json.dumps(self.trace, indent=2, sort_keys=True)


def _refine(rs: RuleSet, mask: np.ndarray, t_n: int, phi: Callable, tol: float):
    problem, tm = rs.problem, rs.tm
    K = problem.controls.K
    pts = problem.lattice.points
    target = np.asarray(phi(problem.grid.time(t_n), pts), dtype=float)
    W = target
    new = mask.copy()
    for i in range(t_n - 1, -1, -1):
        Q = np.full((mask.shape[1], mask.shape[2]), -np.inf)
        for k in range(K):
            if mask[i, :, k].any():
                Q[:, k] = tm.expect(i, k, W)
        if problem.stops:
            Q[:, K] = target  # a stopped path stays where it stopped
        Q = np.where(mask[i], Q, -np.inf)
        best = Q.max(axis=1)
        new[i] = mask[i] & (Q >= best[:, None] - tol)
        W = best
    return new, float(W[rs.start]) if t_n > 0 else float(target[rs.start])


def krylov_select(rules: RuleSet, order: Optional[SelectionOrder] = None, n_rounds: int = 64,
                  tol: float = 1e-12) -> Selection:
    """Iteratively keep the rules maximizing E[phi_n(t_n, X_{t_n})]; break remaining ties by lowest index."""
    if rules is None or rules.vertex_count() == 0:
        raise ValueError("empty rule set")
    order = default_order(rules.problem, n_rounds) if order is None else order
    mask = rules.mask.copy()
    trace = []
    for j in range(min(n_rounds, len(order))):
        item = order[j]
        t_n, phi = item[0], item[1]
        label = item[2] if len(item) > 2 else str(j)
        mask, best = _refine(rules, mask, t_n, phi, tol)
        count = math.prod(int(c) for c in mask.sum(axis=2).ravel())
        trace.append({"round": j, "time_index": int(t_n), "functional": label, "surviving": count, "max": best})
    survivors = RuleSet(rules.problem, rules.tm, mask, rules.value, rules.start)
    return Selection(survivors.first(), survivors, trace)


def forward_marginal(problem: Problem, tm: TransitionModel, rule: DiscreteRule, t_n: int) -> np.ndarray:
    """Law of the (stopped) chain at time index ``t_n`` started from ``rule.start``."""
    N, K = problem.lattice.n_nodes, problem.controls.K
    live = np.zeros(N)
    live[rule.start] = 1.0
    frozen = np.zeros(N)
    for i in range(t_n):
        if rule.stop is not None:
            frozen = frozen + live * rule.stop[i]
            live = live * (1 - rule.stop[i])
        nxt = np.zeros(N)
        for k in range(K):
            w = live * rule.kernels[i, :, k]
            if not np.any(w):
                continue
            lay = tm.layer(i)
            np.add.at(nxt, lay.targets[k].ravel(), (w[:, None] * lay.probs[k]).ravel())
        live = nxt
    return live + frozen


def _histories(problem: Problem, tm: TransitionModel, rule, max_histories: int):
    """Positive-probability node histories by time index."""
    levels = [[(rule.start,)]]
    n = problem.grid.n_steps
    for i in range(n):
        nxt = []
        for h in levels[-1]:
            ker, sp = rule.at(i, h)
            if sp >= 1.0:
                continue
            succ = set()
            for k, w in enumerate(ker):
                if w > 0:
                    succ.update(y for y, p in tm.row(i, h[-1], k).items() if p > 0)
            nxt.extend(h + (y,) for y in sorted(succ))
        if sum(len(lv) for lv in levels) + len(nxt) > max_histories:
            raise SizeError(f"more than {max_histories} histories")
        levels.append(nxt)
    return levels


def _future_law(problem: Problem, tm: TransitionModel, rule, h: tuple, cache: dict) -> dict:
    key = h
    if key in cache:
        return cache[key]
    i = len(h) - 1
    if i == problem.grid.n_steps:
        cache[key] = {(): 1.0}
        return cache[key]
    ker, sp = rule.at(i, h)
    out: dict = {}
    if sp > 0:
        out[("stop",)] = sp
    for k, w in enumerate(ker):
        if w <= 0 or sp >= 1:
            continue
        for y, p in tm.row(i, h[-1], k).items():
            if p <= 0:
                continue
            for path, q in _future_law(problem, tm, rule, h + (y,), cache).items():
                key2 = ((k, y),) + path
                out[key2] = out.get(key2, 0.0) + (1 - sp) * w * p * q
    cache[key] = out
    return out


def verify_markov(rule, problem: Problem, tm: TransitionModel, max_histories: int = 20000) -> dict:
    """Max total-variation distance between future laws given different histories at the same (i, x)."""
    levels = _histories(problem, tm, rule, max_histories)
    cache: dict = {}
    worst = 0.0
    n_groups = 0
    for i, hs in enumerate(levels):
        groups: dict = {}
        for h in hs:
            groups.setdefault(h[-1], []).append(h)
        for x, members in groups.items():
            if len(members) < 2:
                continue
            n_groups += 1
            ref = _future_law(problem, tm, rule, members[0], cache)
            for h in members[1:]:
                law = _future_law(problem, tm, rule, h, cache)
                keys = set(ref) | set(law)
                tv = 0.5 * sum(abs(ref.get(k, 0.0) - law.get(k, 0.0)) for k in keys)
                worst = max(worst, tv)
    return {"max_tv": float(worst), "n_histories": sum(len(lv) for lv in levels), "n_groups": n_groups,
            "markov": bool(worst == 0.0)}


@dataclass(frozen=True)
class MStar:
    kernels: np.ndarray
    stop: Optional[np.ndarray]
    policy: Optional[np.ndarray]
    start: int = 0

    def rule(self) -> DiscreteRule:
        return DiscreteRule(self.kernels, self.stop, self.start)

    def to_csv(self, problem: Problem) -> str:
        return rule_to_csv(self.rule(), problem)


def extract_mstar(rule: DiscreteRule) -> MStar:
    """Feedback kernel (t_i, x) -> distribution over atoms; also the ordinary policy when every kernel is Dirac."""
    ker = np.array(rule.kernels)
    dirac = np.all(np.isclose(ker.max(axis=2), 1.0, atol=0, rtol=0))
    if rule.stop is not None:
        dirac = dirac and np.all((rule.stop == 0) | (rule.stop == 1))
    policy = np.argmax(ker, axis=2) if dirac else None
    stop = None if rule.stop is None else np.array(rule.stop)
    return MStar(ker, stop, policy, rule.start)


def mixed_characteristics(problem: Problem, rule: DiscreteRule, i: int) -> dict:
    """Per-node drift, diffusion, jump rates and running reward mixed by the rule's kernel."""
    pts = problem.lattice.points
    N, d = pts.shape
    t = problem.grid.time(i)
    coeffs = problem.model_coeffs()
    b = np.zeros((N, d))
    a = np.zeros((N, d, d))
    lam = np.zeros((N, len(coeffs.jumps)))
    run = np.zeros(N)
    for k in range(problem.controls.K):
        w = rule.kernels[i, :, k]
        u = problem.control_block(k, N)
        b += w[:, None] * np.broadcast_to(coeffs.drift(t, pts, u), (N, d))
        a += w[:, None, None] * np.broadcast_to(coeffs.diffusion(t, pts, u), (N, d, d))
        lam += w[:, None] * coeffs.jump_rates(t, pts, u)
        run += w * problem.rewards.running(t, pts, u)
    return {"drift": b, "diffusion": a, "jump_rates": lam, "running": run}


def characteristics_gap(problem: Problem, tm: TransitionModel, v: ValueFunction, rule: DiscreteRule) -> float:
    """Max shortfall of the rule's one-step value against the optimal value, over all nodes."""
    gap = 0.0
    K = problem.controls.K
    for i in range(problem.grid.n_steps):
        q = continuation_values(problem, tm, i, v.values[i + 1])
        full = np.full((K, q.shape[1]), -np.inf)
        play = [0] if problem.mode == Mode.STOP else list(range(K))
        full[play] = q
        w = rule.kernels[i]
        val = np.sum(np.where(w.T > 0, w.T * full, 0.0), axis=0)
        if rule.stop is not None:
            sp = rule.stop[i]
            val = np.where(sp > 0, sp * stopping_values(problem, i) + (1 - sp) * np.where(sp < 1, val, 0.0), val)
        gap = max(gap, float(np.max(v.values[i] - val)))
    return gap


def rule_to_csv(rule: DiscreteRule, problem: Problem) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = problem.dim
    w.writerow(["i", "t", "node"] + [f"x{j + 1}" for j in range(d)] + ["atom", "weight"])
    pts = problem.lattice.points
    labels = problem.controls.labels
    n, N, K = rule.kernels.shape
    for i in range(n):
        t = problem.grid.time(i)
        for x in range(N):
            head = [i, f"{t:.17g}", x] + [f"{c:.17g}" for c in pts[x]]
            for k in range(K):
                wt = rule.kernels[i, x, k]
                if wt:
                    w.writerow(head + [labels[k], f"{wt:.17g}"])
            if rule.stop is not None and rule.stop[i, x]:
                w.writerow(head + ["stop", f"{rule.stop[i, x]:.17g}"])
    return buf.getvalue()
