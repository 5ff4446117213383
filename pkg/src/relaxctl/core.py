"""Problem definitions, grids, coefficients and the controlled generator.

Coefficient and reward callables are vectorized over points: they receive a
time ``t`` (float), states ``x`` of shape ``(N, d)`` and controls ``u`` of
shape ``(N, m)`` and return arrays with a leading ``N`` axis.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np


class EvaluationError(ValueError):
    """A coefficient or test-function evaluation produced a non-finite value."""


class ConfigurationError(ValueError):
    pass


class Mode(str, enum.Enum):
    CONTROL = "control-only"
    CONTROL_STOP = "control-and-stop"
    STOP = "stop-only"


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.t0 < self.T:
            raise ConfigurationError(f"time grid needs t0 < T, got {self.t0} >= {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def time(self, i: int) -> float:
        return self.t0 + self.dt * i

    def refine(self, n_sub: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.n_steps * n_sub)


@dataclass(frozen=True)
class StateLattice:
    """Rectangular lattice with per-axis bounds and spacing, nodes in C order."""

    lower: tuple
    upper: tuple
    h: tuple

    def __post_init__(self):
        lo, hi, h = (tuple(float(v) for v in np.atleast_1d(a)) for a in (self.lower, self.upper, self.h))
        if not (len(lo) == len(hi) == len(h)) or len(lo) == 0:
            raise ConfigurationError("lattice bounds and spacing must share one positive dimension")
        for ax, (a, b, s) in enumerate(zip(lo, hi, h)):
            if not a < b:
                raise ConfigurationError(f"lattice axis {ax}: need x_min < x_max")
            if not s > 0:
                raise ConfigurationError(f"lattice axis {ax}: spacing must be positive")
            cells = (b - a) / s
            if abs(cells - round(cells)) > 1e-9 * max(1.0, cells) or round(cells) < 1:
                raise ConfigurationError(f"lattice axis {ax}: (x_max - x_min)/h = {cells} is not a positive integer")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> tuple:
        return tuple(int(round((b - a) / s)) + 1 for a, b, s in zip(self.lower, self.upper, self.h))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def points(self) -> np.ndarray:
        axes = [a + s * np.arange(n) for a, s, n in zip(self.lower, self.h, self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, np.asarray(self.lower), np.asarray(self.upper))

    def multi_index(self, x: np.ndarray) -> np.ndarray:
        """Nearest-node multi-index of each row of ``x`` (clamped to the box)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.rint((x - np.asarray(self.lower)) / np.asarray(self.h)).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.shape) - 1)

    def nearest(self, x: np.ndarray) -> np.ndarray:
        idx = self.multi_index(x)
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def node_of(self, x) -> int:
        return int(self.nearest(np.reshape(np.asarray(x, dtype=float), (1, -1)))[0])


@dataclass(frozen=True)
class ControlSet:
    atoms: np.ndarray
    labels: Optional[tuple] = None

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise ConfigurationError("control set needs at least one atom")
        if len({tuple(a) for a in atoms}) != len(atoms):
            raise ConfigurationError("control atoms must be pairwise distinct")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        if self.labels is None:
            object.__setattr__(self, "labels", tuple(f"u{k + 1}" for k in range(len(atoms))))

    @property
    def K(self) -> int:
        return self.atoms.shape[0]

    def __len__(self):
        return self.K


@dataclass(frozen=True)
class Jump:
    """One atom of the jump kernel: intensity ``rate(t, x, u) -> (N,)`` and displacement ``z``."""

    rate: Callable
    z: np.ndarray

    def __post_init__(self):
        z = np.atleast_1d(np.asarray(self.z, dtype=float))
        if not np.any(z != 0):
            raise ConfigurationError("jump displacement must be nonzero")
        object.__setattr__(self, "z", z)

    @property
    def compensated(self) -> bool:
        # strict inequality: |z| = 1 is not compensated
        return bool(np.linalg.norm(self.z) < 1.0)


@dataclass(frozen=True)
class Coefficients:
    drift: Callable
    diffusion: Callable
    jumps: tuple = ()
    time_homogeneous: bool = False

    def jump_rates(self, t, x, u) -> np.ndarray:
        """Intensities as an ``(N, J)`` array."""
        if not self.jumps:
            return np.zeros((len(x), 0))
        return np.stack([np.broadcast_to(np.asarray(j.rate(t, x, u), dtype=float), (len(x),)) for j in self.jumps], axis=1)

    def jump_offsets(self) -> np.ndarray:
        if not self.jumps:
            return np.zeros((0, 0))
        return np.stack([j.z for j in self.jumps])

    def effective_drift(self, t, x, u) -> np.ndarray:
        """Drift of the process between jumps: b minus the compensator of small jumps."""
        b = np.array(np.broadcast_to(self.drift(t, x, u), x.shape), dtype=float)
        for j in self.jumps:
            if j.compensated:
                b -= np.asarray(j.rate(t, x, u), dtype=float).reshape(-1, 1) * j.z
        return b

    def clamped(self, lattice: StateLattice) -> "Coefficients":
        """Same coefficients evaluated at the state clamped into ``lattice``."""

        def wrap(fn):
            return lambda t, x, u: fn(t, lattice.clamp(x), u)

        return Coefficients(
            drift=wrap(self.drift),
            diffusion=wrap(self.diffusion),
            jumps=tuple(Jump(wrap(j.rate), j.z) for j in self.jumps),
            time_homogeneous=self.time_homogeneous,
        )


@dataclass(frozen=True)
class RewardSpec:
    running: Callable
    terminal: Callable
    stopping: Optional[Callable] = None


@dataclass(frozen=True)
class Problem:
    grid: TimeGrid
    lattice: StateLattice
    controls: ControlSet
    coeffs: Coefficients
    rewards: RewardSpec
    mode: Mode = Mode.CONTROL
    x0: Optional[tuple] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        d = self.lattice.dim
        for j in self.coeffs.jumps:
            if j.z.shape != (d,):
                raise ConfigurationError(f"jump displacement {j.z} does not match state dimension {d}")
        if self.mode != Mode.CONTROL and self.rewards.stopping is None:
            raise ConfigurationError(f"mode {self.mode.value} requires a stopping reward")
        if self.x0 is None:
            mid = tuple((a + b) / 2 for a, b in zip(self.lattice.lower, self.lattice.upper))
            object.__setattr__(self, "x0", tuple(self.lattice.points[self.lattice.node_of(mid)]))
        else:
            x0 = tuple(float(v) for v in np.atleast_1d(self.x0))
            if len(x0) != d:
                raise ConfigurationError(f"x0 has dimension {len(x0)}, lattice has {d}")
            object.__setattr__(self, "x0", x0)

    @property
    def dim(self) -> int:
        return self.lattice.dim

    @property
    def x0_node(self) -> int:
        return self.lattice.node_of(self.x0)

    @property
    def stops(self) -> bool:
        return self.mode != Mode.CONTROL

    def model_coeffs(self) -> Coefficients:
        return self.coeffs.clamped(self.lattice)

    def control_block(self, k: int, n: int) -> np.ndarray:
        return np.broadcast_to(self.controls.atoms[k], (n, self.controls.atoms.shape[1]))


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class TestFunction:
    """A C_b^2 function with analytic gradient and Hessian, vectorized over rows."""

    index: int
    name: str
    value: Callable
    grad: Callable
    hess: Callable

    __test__ = False  # keep pytest from collecting this class

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.value(np.atleast_2d(x))


def _calkin_wilf(n: int) -> Fraction:
    """n-th positive rational (n >= 1) in Calkin-Wilf order: 1, 1/2, 2, 1/3, 3/2, ..."""
    q = Fraction(1)
    for _ in range(n - 1):
        q = 1 / (2 * Fraction(int(q)) - q + 1)
    return q


def _const(index: int, d: int) -> TestFunction:
    return TestFunction(
        index, "1",
        lambda x: np.ones(len(x)),
        lambda x: np.zeros_like(x),
        lambda x: np.zeros((len(x), d, d)),
    )


def _monomial(index: int, d: int, powers: tuple) -> TestFunction:
    p = np.asarray(powers)

    def value(x):
        return np.prod(x ** p, axis=1)

    def grad(x):
        g = np.empty_like(x)
        for i in range(d):
            q = p.copy()
            if q[i] == 0:
                g[:, i] = 0.0
                continue
            q[i] -= 1
            g[:, i] = p[i] * np.prod(x ** q, axis=1)
        return g

    def hess(x):
        H = np.zeros((len(x), d, d))
        for i in range(d):
            for k in range(d):
                q = p.copy()
                c = q[i]
                q[i] -= 1
                c *= q[k]
                q[k] -= 1
                if c != 0:
                    H[:, i, k] = c * np.prod(x ** np.maximum(q, 0), axis=1)
        return H

    label = "*".join(f"x{i + 1}" + (f"^{e}" if e > 1 else "") for i, e in enumerate(powers) if e) or "1"
    return TestFunction(index, label, value, grad, hess)


def _trig(index: int, c: np.ndarray, kind: str) -> TestFunction:
    if kind == "sin":
        f, df = np.sin, np.cos
        d2 = lambda s: -np.sin(s)
    else:
        f, df = np.cos, lambda s: -np.sin(s)
        d2 = lambda s: -np.cos(s)
    label = f"{kind}({'+'.join(f'{ci:g}*x{i + 1}' for i, ci in enumerate(c) if ci)})"
    return TestFunction(
        index, label,
        lambda x: f(x @ c),
        lambda x: df(x @ c)[:, None] * c,
        lambda x: d2(x @ c)[:, None, None] * np.outer(c, c),
    )


def _gauss_poly(index: int, d: int, powers: tuple) -> TestFunction:
    mono = _monomial(index, d, powers)

    def value(x):
        return np.exp(-0.5 * np.sum(x * x, axis=1)) * mono.value(x)

    def grad(x):
        g = np.exp(-0.5 * np.sum(x * x, axis=1))[:, None]
        return g * (mono.grad(x) - x * mono.value(x)[:, None])

    def hess(x):
        g = np.exp(-0.5 * np.sum(x * x, axis=1))
        p, Dp, D2p = mono.value(x), mono.grad(x), mono.hess(x)
        eye = np.eye(d)[None]
        H = (
            D2p
            - np.einsum("ni,nk->nik", x, Dp)
            - np.einsum("ni,nk->nik", Dp, x)
            + p[:, None, None] * (np.einsum("ni,nk->nik", x, x) - eye)
        )
        return g[:, None, None] * H

    return TestFunction(index, f"exp(-|x|^2/2)*{mono.name}", value, grad, hess)


def _frequency(n: int, d: int) -> np.ndarray:
    """n-th rational frequency vector: Calkin-Wilf magnitudes cycling over axes and the diagonal."""
    q = float(_calkin_wilf((n - 1) // (d + 1 if d > 1 else 1) + 1))
    c = np.zeros(d)
    slot = (n - 1) % (d + 1) if d > 1 else 0
    if slot < d:
        c[slot] = q
    else:
        c[:] = q
    return c


def _monomials(d: int, degree: int):
    for combo in itertools.combinations_with_replacement(range(d), degree):
        powers = [0] * d
        for i in combo:
            powers[i] += 1
        yield tuple(powers)


def test_function(index: int, d: int) -> TestFunction:
    """Member ``index`` (1-based) of the fixed countable test family on R^d.

    Order: 1, x_i, x_i x_k (i <= k), then for n = 1, 2, ... the triple
    sin(c_n . x), cos(c_n . x), exp(-|x|^2/2) * (n-th monomial).
    """
    if index < 1:
        raise ValueError("test functions are indexed from 1")
    if index == 1:
        return _const(1, d)
    poly = [p for deg in (1, 2) for p in _monomials(d, deg)]
    if index - 2 < len(poly):
        return _monomial(index, d, poly[index - 2])
    n, kind = divmod(index - 2 - len(poly), 3)
    if kind == 0:
        return _trig(index, _frequency(n + 1, d), "sin")
    if kind == 1:
        return _trig(index, _frequency(n + 1, d), "cos")
    mono = None
    for j, p in enumerate(p for deg in itertools.count() for p in _monomials(d, deg)):
        if j == n:
            mono = p
            break
    return _gauss_poly(index, d, mono)


def test_family(n: int, d: int) -> list:
    return [test_function(i, d) for i in range(1, n + 1)]


test_function.__test__ = False
test_family.__test__ = False


# ---------------------------------------------------------------------------
# generator


def generator_values(coeffs: Coefficients, phi: TestFunction, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Controlled generator applied to ``phi`` at each row of (x, u)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n, d = x.shape
    b = np.broadcast_to(np.asarray(coeffs.drift(t, x, u), dtype=float), (n, d))
    a = np.broadcast_to(np.asarray(coeffs.diffusion(t, x, u), dtype=float), (n, d, d))
    Dphi = phi.grad(x)
    D2phi = phi.hess(x)
    out = np.einsum("ni,ni->n", b, Dphi) + 0.5 * np.einsum("nij,nij->n", a, D2phi)
    if coeffs.jumps:
        base = phi.value(x)
        lam = coeffs.jump_rates(t, x, u)
        for j, jump in enumerate(coeffs.jumps):
            incr = phi.value(x + jump.z) - base
            if jump.compensated:
                incr = incr - Dphi @ jump.z
            out = out + lam[:, j] * incr
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise EvaluationError(f"non-finite generator value at t={t}, x={x[bad].tolist()}, u={u[bad].tolist()}")
    return out


def generator_apply(coeffs: Coefficients, phi: TestFunction, t: float, x, u) -> float:
    x = np.reshape(np.asarray(x, dtype=float), (1, -1))
    u = np.reshape(np.asarray(u, dtype=float), (1, -1))
    return float(generator_values(coeffs, phi, t, x, u)[0])


@dataclass
class BoundsReport:
    drift: float = 0.0
    diffusion: float = 0.0
    jump: float = 0.0
    running: float = 0.0
    terminal: float = 0.0
    stopping: float = 0.0
    nonfinite: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.nonfinite

    def as_dict(self) -> dict:
        return {
            "drift": self.drift, "diffusion": self.diffusion, "jump": self.jump,
            "running": self.running, "terminal": self.terminal, "stopping": self.stopping,
            "nonfinite": list(self.nonfinite),
        }


def scan_bounds(problem: Problem) -> BoundsReport:
    """Sup norms of coefficients and rewards over grid times, lattice nodes and atoms."""
    rep = BoundsReport()
    x = problem.lattice.points
    n = len(x)
    coeffs = problem.coeffs
    z = coeffs.jump_offsets()
    znorm = np.linalg.norm(z, axis=1) if len(z) else np.zeros(0)
    jweight = np.minimum(znorm ** 2, znorm)

    def track(attr, values, what):
        values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(values)):
            rep.nonfinite.append(what)
            values = values[np.isfinite(values)]
        if values.size:
            setattr(rep, attr, max(getattr(rep, attr), float(np.max(np.abs(values)))))

    times = problem.grid.times[:1] if coeffs.time_homogeneous else problem.grid.times
    for t in times:
        for k in range(problem.controls.K):
            u = problem.control_block(k, n)
            tag = f"t={t:g},atom={k}"
            b = np.broadcast_to(coeffs.drift(t, x, u), x.shape)
            track("drift", np.linalg.norm(b, axis=1), f"drift[{tag}]")
            a = np.broadcast_to(coeffs.diffusion(t, x, u), (n, x.shape[1], x.shape[1]))
            track("diffusion", np.linalg.norm(a, ord=2, axis=(1, 2)) if np.all(np.isfinite(a)) else a.reshape(n, -1),
                  f"diffusion[{tag}]")
            if len(z):
                lam = coeffs.jump_rates(t, x, u)
                if np.any(lam < 0):
                    rep.nonfinite.append(f"negative jump rate[{tag}]")
                track("jump", lam @ jweight, f"jump[{tag}]")
            track("running", problem.rewards.running(t, x, u), f"running[{tag}]")
        if problem.rewards.stopping is not None:
            track("stopping", problem.rewards.stopping(t, x), f"stopping[t={t:g}]")
    if coeffs.time_homogeneous and problem.rewards.stopping is not None:
        for t in problem.grid.times[1:]:
            track("stopping", problem.rewards.stopping(t, x), f"stopping[t={t:g}]")
    if coeffs.time_homogeneous:
        # running reward may still depend on time
        for t in problem.grid.times[1:]:
            for k in range(problem.controls.K):
                track("running", problem.rewards.running(t, x, problem.control_block(k, n)), f"running[t={t:g},atom={k}]")
    track("terminal", problem.rewards.terminal(x), "terminal")
    return rep


def check_psd(a: np.ndarray, tol: float = 1e-10) -> bool:
    a = np.asarray(a)
    if not np.allclose(a, np.swapaxes(a, -1, -2), atol=tol):
        return False
    return bool(np.all(np.linalg.eigvalsh(a) >= -tol))


# ---------------------------------------------------------------------------
# coefficient constructors


def constant(value, shape: Sequence[int]) -> Callable:
    v = np.asarray(value, dtype=float).reshape(tuple(shape))

    def fn(t, x, u=None):
        return np.broadcast_to(v, (len(x),) + v.shape)

    return fn


def linear_drift(A, B, c=None) -> Callable:
    """b(t, x, u) = A x + B u + c."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    c = np.zeros(A.shape[0]) if c is None else np.asarray(c, dtype=float)

    def fn(t, x, u):
        return x @ A.T + u @ B.T + c

    return fn


def control_drift(scale=1.0) -> Callable:
    """b(t, x, u) = scale * u (control enters the drift directly)."""

    def fn(t, x, u):
        return scale * np.asarray(u, dtype=float)

    return fn


def table_by_atom(lattice: StateLattice, atoms: np.ndarray, values: np.ndarray) -> Callable:
    """Coefficient read from ``values[node, atom, ...]`` at the nearest lattice node."""
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    if atoms.shape[0] == 1 and atoms.shape[1] != 1:
        atoms = atoms.T
    values = np.asarray(values, dtype=float)

    def fn(t, x, u):
        nodes = lattice.nearest(x)
        u = np.atleast_2d(u)
        k = np.argmin(np.abs(u[:, None, :] - atoms[None, :, :]).sum(axis=2), axis=1)
        return values[nodes, k]

    return fn
