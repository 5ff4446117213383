"""Discretized Young measures, their Dirac embedding and chattering approximation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import ControlSet, TimeGrid

ROW_TOL = 1e-12


class InvalidMeasure(ValueError):
    def __init__(self, cell: int, reason: str):
        super().__init__(f"time cell {cell}: {reason}")
        self.cell = cell


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class YoungMeasure:
    """Relaxed control on a finite horizon: ``weights[i, k]`` is the mass of atom k in time cell i.

    The time marginal is Lebesgue, so each row is a probability vector.
    """

    grid: TimeGrid
    controls: ControlSet
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.shape != (self.grid.n_steps, self.controls.K):
            raise ValueError(f"weights shape {w.shape} != ({self.grid.n_steps}, {self.controls.K})")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def integrate(self, fn: Callable) -> float:
        """m(fn) = sum_i sum_k dt * w[i, k] * fn(t_i, u_k)."""
        t = self.grid.times[:-1]
        vals = np.array([[fn(ti, uk) for uk in self.controls.atoms] for ti in t], dtype=float)
        return float(self.grid.dt * np.sum(self.weights * vals))

    def row(self, i: int) -> np.ndarray:
        return self.weights[i]


def validate_young(m: YoungMeasure) -> YoungMeasure:
    """Check row sums and signs; returns ``m`` with rows renormalized to sum exactly 1."""
    w = m.weights
    for i, row in enumerate(w):
        if np.any(row < 0):
            raise InvalidMeasure(i, f"negative weight {row.min()}")
        dev = abs(row.sum() - 1.0)
        if dev >= ROW_TOL:
            raise InvalidMeasure(i, f"row sums to {row.sum()!r}")
    return YoungMeasure(m.grid, m.controls, w / w.sum(axis=1, keepdims=True))


def dirac(grid: TimeGrid, controls: ControlSet, atoms: Sequence[int]) -> YoungMeasure:
    w = np.zeros((grid.n_steps, controls.K))
    w[np.arange(grid.n_steps), np.asarray(atoms)] = 1.0
    return YoungMeasure(grid, controls, w)


@dataclass(frozen=True)
class PiecewiseControl:
    """Ordinary control constant on each subcell of ``grid`` (a refinement of a parent grid)."""

    grid: TimeGrid
    controls: ControlSet
    atoms: np.ndarray

    def __post_init__(self):
        a = np.array(self.atoms, dtype=np.int64)
        if a.shape != (self.grid.n_steps,):
            raise ValueError(f"need one atom per subcell ({self.grid.n_steps}), got shape {a.shape}")
        if a.size and (a.min() < 0 or a.max() >= self.controls.K):
            raise ValueError("atom index out of range")
        a.setflags(write=False)
        object.__setattr__(self, "atoms", a)

    def refinement_of(self, parent: TimeGrid) -> int:
        """Number of subcells per parent cell; raises if the grids do not align."""
        g = self.grid
        if not (np.isclose(g.t0, parent.t0) and np.isclose(g.T, parent.T)):
            raise AlignmentError(f"horizon [{g.t0}, {g.T}] differs from [{parent.t0}, {parent.T}]")
        if g.n_steps % parent.n_steps:
            raise AlignmentError(f"{g.n_steps} subcells do not refine {parent.n_steps} cells")
        return g.n_steps // parent.n_steps

    def atom_at(self, t: float) -> int:
        i = int(np.floor((t - self.grid.t0) / self.grid.dt + 1e-9))
        return int(self.atoms[min(max(i, 0), self.grid.n_steps - 1)])


def embed_dirac(nu: PiecewiseControl, grid: TimeGrid) -> YoungMeasure:
    """Occupation fractions of each atom within each cell of ``grid``."""
    r = nu.refinement_of(grid)
    counts = np.zeros((grid.n_steps, nu.controls.K))
    cells = np.repeat(np.arange(grid.n_steps), r)
    np.add.at(counts, (cells, nu.atoms), 1.0)
    return validate_young(YoungMeasure(grid, nu.controls, counts / r))


def largest_remainder(weights: np.ndarray, n: int) -> np.ndarray:
    """Integer counts summing to ``n`` closest to ``n * weights``; ties go to the lower index."""
    target = n * np.asarray(weights, dtype=float)
    counts = np.floor(target + 1e-12).astype(np.int64)
    counts = np.minimum(counts, n)
    short = n - counts.sum()
    if short > 0:
        rem = target - counts
        order = np.lexsort((np.arange(len(rem)), -rem))
        counts[order[:short]] += 1
    elif short < 0:  # only through the 1e-12 nudge on sums slightly above 1
        order = np.lexsort((np.arange(len(counts)), target - counts))
        counts[order[:-short]] -= 1
    return counts


def chattering_approx(m: YoungMeasure, n_sub: int) -> PiecewiseControl:
    """Piecewise-constant control whose Dirac embedding approximates ``m``.

    Each cell is split into ``n_sub`` subcells; atom k gets a contiguous block
    of largest-remainder(n_sub * w[i, k]) subcells, atoms in index order.
    """
    if int(n_sub) != n_sub or n_sub < 1:
        raise ValueError(f"n_sub must be a positive integer, got {n_sub}")
    n_sub = int(n_sub)
    blocks = [np.repeat(np.arange(m.controls.K), largest_remainder(row, n_sub)) for row in m.weights]
    return PiecewiseControl(m.grid.refine(n_sub), m.controls, np.concatenate(blocks))


def row_l1(m1: YoungMeasure, m2: YoungMeasure) -> np.ndarray:
    return np.abs(m1.weights - m2.weights).sum(axis=1)


def bl_distance(m1: YoungMeasure, m2: YoungMeasure, fam: Sequence[Callable]) -> float:
    """max over ``fam`` of |m1(phi) - m2(phi)|; a seminorm proxy for weak convergence."""
    if not len(fam):
        raise ValueError("test family is empty")
    if m1.grid != m2.grid or m1.controls.K != m2.controls.K or not np.array_equal(m1.controls.atoms, m2.controls.atoms):
        raise ValueError("measures live on different grids or control sets")
    diff = YoungMeasure(m1.grid, m1.controls, m1.weights - m2.weights)
    return max(abs(diff.integrate(fn)) for fn in fam)


def time_control_family(controls: ControlSet, T: float, n: int = 8, t0: float = 0.0) -> list:
    """Bounded test functions on [t0, T] x U: atom indicators and time-modulated atom coordinates."""
    atoms = controls.atoms
    fam = []
    for k in range(controls.K):
        a = atoms[k]
        fam.append(lambda t, u, a=a: float(np.all(u == a)))
    span = T - t0
    for j in range(1, n + 1):
        fam.append(lambda t, u, j=j: float(np.cos(np.pi * j * (t - t0) / span) * np.tanh(np.sum(u))))
        fam.append(lambda t, u, j=j: float(np.sin(np.pi * j * (t - t0) / span) * np.tanh(np.sum(u))))
    return fam


def to_csv(m: YoungMeasure) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(m.controls.labels))
    for row in m.weights:
        w.writerow([f"{v:.17g}" for v in row])
    return buf.getvalue()


def from_csv(text: str, grid: TimeGrid, controls: ControlSet) -> YoungMeasure:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    if len(header) != controls.K:
        raise ValueError(f"CSV has {len(header)} atom columns, control set has {controls.K}")
    return validate_young(YoungMeasure(grid, controls, np.array(body, dtype=float)))
