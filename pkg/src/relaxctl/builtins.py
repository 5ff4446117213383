"""Named problem instances used by the CLI and the acceptance experiments."""

from __future__ import annotations

import math

import numpy as np

from .core import (
    Coefficients,
    ControlSet,
    Jump,
    Mode,
    Problem,
    RewardSpec,
    StateLattice,
    TimeGrid,
    constant,
    linear_drift,
    table_by_atom,
)


def cfl_spacing(var: float, dt: float, half_width: float, grid_step: float = 0.0, jump_rate: float = 0.0,
                drift_bound: float = 0.0) -> float:
    """Smallest spacing h dividing ``half_width`` whose chain keeps a nonnegative stay probability.

    The total jump rate out of a node is var / h^2 where central differencing
    applies (var >= |b| h) and var / h^2 + |b| / h where it falls back to
    upwinding; ``drift_bound`` bounds |b|. With ``grid_step`` set, h must also
    divide it so jump sizes stay on the lattice.
    """

    def ok(h):
        rate = var / h ** 2 + (drift_bound / h if drift_bound * h > var else 0.0) + jump_rate
        return dt * rate <= 1.0 + 1e-12

    n = max(1, int(math.ceil(half_width / math.sqrt(var * dt)))) if var > 0 else 1
    while n > 1:
        h = half_width / n
        if ok(h) and (not grid_step or abs(grid_step / h - round(grid_step / h)) < 1e-9):
            return h
        n -= 1
    return half_width


def _atoms(lo: float, hi: float, n: int) -> np.ndarray:
    return np.linspace(lo, hi, n)


def lq(A=0.0, B=1.0, sigma=0.5, q=1.0, r=1.0, p=1.0, T=1.0, n_steps=200, x0=1.0, half_width=3.0,
       h=None, u_max=3.0, n_atoms=121, **_) -> Problem:
    """dX = (A x + B u) dt + sigma dW, reward -(q x^2 + r u^2) dt - p X_T^2."""
    grid = TimeGrid(0.0, T, n_steps)
    h = h or cfl_spacing(sigma ** 2, grid.dt, half_width, drift_bound=abs(A) * half_width + abs(B) * u_max)
    lat = StateLattice((-half_width,), (half_width,), (h,))
    controls = ControlSet(_atoms(-u_max, u_max, n_atoms))
    coeffs = Coefficients(linear_drift([[A]], [[B]]), constant([[sigma ** 2]], (1, 1)), time_homogeneous=True)
    rewards = RewardSpec(
        running=lambda t, x, u: -(q * x[:, 0] ** 2 + r * u[:, 0] ** 2),
        terminal=lambda x: -p * x[:, 0] ** 2,
    )
    return Problem(grid, lat, controls, coeffs, rewards, Mode.CONTROL, (x0,), "lq")


def jump_lq(A=0.0, B=1.0, sigma=0.5, q=1.0, r=1.0, p=1.0, T=1.0, n_steps=200, x0=0.0, half_width=3.0,
            h=None, u_max=3.0, n_atoms=61, jump_rate=0.5, jump_size=1.0, **_) -> Problem:
    """The LQ problem plus one jump atom of size ``jump_size`` at rate ``jump_rate``."""
    base = lq(A, B, sigma, q, r, p, T, n_steps, x0, half_width, h, u_max, n_atoms)
    grid = base.grid
    h = h or cfl_spacing(sigma ** 2, grid.dt, half_width, jump_size, jump_rate,
                        drift_bound=abs(A) * half_width + abs(B) * u_max)
    lat = StateLattice((-half_width,), (half_width,), (h,))
    coeffs = Coefficients(
        base.coeffs.drift, base.coeffs.diffusion,
        (Jump(constant(jump_rate, ()), [jump_size]),),
        time_homogeneous=True,
    )
    return Problem(grid, lat, base.controls, coeffs, base.rewards, Mode.CONTROL, (x0,), "jump-lq")


def drift_bang(sigma=0.3, T=1.0, n_steps=20, x0=0.5, half_width=2.0, h=0.1, **_) -> Problem:
    """dX = u dt + sigma dW with u in {-1, +1}; reward -X^2 dt - X_T^2."""
    grid = TimeGrid(0.0, T, n_steps)
    lat = StateLattice((-half_width,), (half_width,), (h,))
    controls = ControlSet([-1.0, 1.0])
    coeffs = Coefficients(linear_drift([[0.0]], [[1.0]]), constant([[sigma ** 2]], (1, 1)), time_homogeneous=True)
    rewards = RewardSpec(
        running=lambda t, x, u: -x[:, 0] ** 2,
        terminal=lambda x: -x[:, 0] ** 2,
    )
    return Problem(grid, lat, controls, coeffs, rewards, Mode.CONTROL, (x0,), "drift-bang")


def put_stop(strike=0.5, decay=0.25, sigma=1.0, T=1.0, n_steps=4, x0=0.0, half_width=2.0, **_) -> Problem:
    """Stopping a driftless walk with reward (1 - decay t) (strike - x)^+.

    Defaults give a symmetric +-0.5 walk with dyadic rewards, so lattice
    arithmetic is exact.
    """
    grid = TimeGrid(0.0, T, n_steps)
    h = sigma * math.sqrt(grid.dt)
    lat = StateLattice((-half_width,), (half_width,), (h,))
    controls = ControlSet([0.0])
    coeffs = Coefficients(constant([0.0], (1,)), constant([[sigma ** 2]], (1, 1)), time_homogeneous=True)

    def stopping(t, x):
        return (1.0 - decay * t) * np.maximum(strike - x[:, 0], 0.0)

    rewards = RewardSpec(
        running=lambda t, x, u: np.zeros(len(x)),
        terminal=lambda x: stopping(T, x),
        stopping=stopping,
    )
    return Problem(grid, lat, controls, coeffs, rewards, Mode.STOP, (x0,), "put-stop")


def tie(n_steps=4, half_width=2, **_) -> Problem:
    """Symmetric instance with exact ties between pushing up and down at the origin.

    dX = u dt + dW on an integer lattice, u in {-1, +1}, terminal reward -|X_T|.
    """
    grid = TimeGrid(0.0, n_steps / 4, n_steps)
    lat = StateLattice((-float(half_width),), (float(half_width),), (1.0,))
    controls = ControlSet([-1.0, 1.0], ("down", "up"))
    coeffs = Coefficients(linear_drift([[0.0]], [[1.0]]), constant([[1.0]], (1, 1)), time_homogeneous=True)
    rewards = RewardSpec(
        running=lambda t, x, u: np.zeros(len(x)),
        terminal=lambda x: -np.abs(x[:, 0]),
    )
    return Problem(grid, lat, controls, coeffs, rewards, Mode.CONTROL, (0.0,), "tie")


def small_random(seed=0, n_steps=3, n_states=3, n_atoms=2, mode="control-and-stop", x0_node=None,
                 with_jump=True, **_) -> Problem:
    """Random instance on an integer lattice with dyadic coefficients and rewards.

    dt = 1/4 and table drifts/variances in multiples of 1/2 make every
    transition probability a multiple of 1/16; rewards are multiples of 1/8.
    All lattice arithmetic is then exact in binary floating point.
    """
    rng = np.random.default_rng(seed)
    grid = TimeGrid(0.0, n_steps / 4, n_steps)
    lat = StateLattice((0.0,), (float(n_states - 1),), (1.0,))
    atoms = np.arange(n_atoms, dtype=float)
    controls = ControlSet(atoms)
    drift = rng.integers(-2, 3, size=(n_states, n_atoms, 1)) / 2
    var = rng.integers(0, 3, size=(n_states, n_atoms, 1, 1)) / 2
    rate = rng.integers(0, 2, size=(n_states, n_atoms)) / 2
    running = rng.integers(-8, 9, size=(n_states, n_atoms)) / 8
    terminal = rng.integers(-8, 9, size=n_states) / 8
    stopping = rng.integers(-8, 9, size=(n_steps + 1, n_states)) / 8
    jumps = ()
    if with_jump and n_states > 2:
        jumps = (Jump(table_by_atom(lat, atoms, rate), [2.0]),)
    coeffs = Coefficients(table_by_atom(lat, atoms, drift), table_by_atom(lat, atoms, var), jumps,
                          time_homogeneous=True)
    run_t = table_by_atom(lat, atoms, running)

    def stop_fn(t, x):
        i = int(round((t - grid.t0) / grid.dt))
        return stopping[i, lat.nearest(x)]

    rewards = RewardSpec(
        running=lambda t, x, u: run_t(t, x, u),
        terminal=lambda x: terminal[lat.nearest(x)],
        stopping=stop_fn if mode != "control-only" else None,
    )
    x0 = (float(n_states // 2 if x0_node is None else x0_node),)
    return Problem(grid, lat, controls, coeffs, rewards, Mode(mode), x0, "small-random")


BUILTINS = {
    "lq": lq,
    "jump-lq": jump_lq,
    "drift-bang": drift_bang,
    "put-stop": put_stop,
    "tie": tie,
    "small-random": small_random,
}


def make(name: str, **params) -> Problem:
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise KeyError(f"unknown built-in problem {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(**params)
