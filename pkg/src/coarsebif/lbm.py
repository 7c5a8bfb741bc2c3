"""D1Q3 BGK lattice Boltzmann simulator for the FitzHugh-Nagumo system.

Distribution arrays have shape ``(..., 3, m)``; the direction axis is ordered
``(-1, 0, +1)``.  Any leading axes are independent runs, which is how a whole
grid of (epsilon, initial condition) cells is simulated in one vectorised loop.
Walls use half-way bounce-back, so the lattice nodes are cell centred (see
:meth:`SpatialGrid.lattice`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core_model import FhnParams, FieldState, InitialConditionParams, SpatialGrid

log = logging.getLogger(__name__)

LEFT, REST, RIGHT = 0, 1, 2


class LbmDivergence(RuntimeError):
    def __init__(self, message: str, t: float):
        super().__init__(f"{message} at t={t:g}")
        self.t = t


@dataclass(frozen=True)
class LbmConfig:
    dt: float = 0.01
    record_every: float = 1.0
    t_end: float = 450.0
    omega_rest: float = 4.0 / 6.0
    omega_move: float = 1.0 / 6.0
    grid: SpatialGrid = field(default_factory=lambda: SpatialGrid.lattice(0.0, 20.0, 40))
    overflow_guard: float = 1e6

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.grid.wall != "cell":
            raise ValueError("bounce-back lattices need a cell-centred grid")
        ratio = self.record_every / self.dt
        if self.record_every <= 0 or abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError("record_every must be a positive integer multiple of dt")
        if abs(self.omega_rest + 2 * self.omega_move - 1.0) > 1e-14:
            raise ValueError("lattice weights must sum to one")

    @property
    def dx(self) -> float:
        return self.grid.dx

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.omega_move, self.omega_rest, self.omega_move])

    @property
    def steps_per_record(self) -> int:
        return int(round(self.record_every / self.dt))


@dataclass(frozen=True)
class LatticeState:
    f_u: np.ndarray
    f_v: np.ndarray
    t: float = 0.0

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.f_u.sum(axis=-2), self.f_v.sum(axis=-2)

    def field(self) -> FieldState:
        u, v = self.moments()
        return FieldState(u, v, self.t)


@dataclass
class Trajectory:
    """Recorded zeroth moments; ``u`` and ``v`` have shape ``(n_times, m)``."""

    times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    epsilon: float
    ic: InitialConditionParams | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.u.shape != self.v.shape or self.u.shape[0] != self.times.size:
            raise ValueError("trajectory arrays have inconsistent shapes")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("time stamps must be strictly increasing")

    @property
    def states(self) -> list[FieldState]:
        return [FieldState(u, v, t) for t, u, v in zip(self.times, self.u, self.v)]

    def __len__(self):
        return self.times.size


def relaxation_coefficient(d: float, dt: float, dx: float) -> float:
    """BGK relaxation ``dt/tau`` that realises diffusivity ``d`` on D1Q3."""
    if d <= 0 or dt <= 0 or dx <= 0:
        raise ValueError("diffusivity, dt and dx must all be positive")
    return 2.0 / (1.0 + 6.0 * d * dt / dx**2)


def initialize_lattice(ic: FieldState, cfg: LbmConfig | None = None) -> LatticeState:
    """Local equilibrium ``f_i = w_i * rho`` for both species."""
    cfg = cfg or LbmConfig()
    if ic.m != cfg.grid.m:
        raise ValueError(f"initial condition has {ic.m} points, lattice has {cfg.grid.m}")
    w = cfg.weights[:, None]
    return LatticeState(w * ic.u, w * ic.v, ic.t)


def _collide_stream(f, rho, source, relax, w, dt):
    post = f + relax * (w * rho[..., None, :] - f) + dt * w * source[..., None, :]
    new = np.empty_like(post)
    new[..., REST, :] = post[..., REST, :]
    new[..., RIGHT, 1:] = post[..., RIGHT, :-1]
    new[..., LEFT, :-1] = post[..., LEFT, 1:]
    # bounce-back: what leaves through a wall comes back in the opposite direction
    new[..., RIGHT, 0] = post[..., LEFT, 0]
    new[..., LEFT, -1] = post[..., RIGHT, -1]
    return new


def _advance(f_u, f_v, epsilon, params: FhnParams, cfg: LbmConfig, relax_u, relax_v, react=True):
    w = cfg.weights[:, None]
    u = f_u.sum(axis=-2)
    v = f_v.sum(axis=-2)
    if react:
        ru = u - u**3 - v
        rv = epsilon[..., None] * (u - params.alpha1 * v - params.alpha0)
    else:
        ru = np.zeros_like(u)
        rv = np.zeros_like(v)
    return (_collide_stream(f_u, u, ru, relax_u, w, cfg.dt),
            _collide_stream(f_v, v, rv, relax_v, w, cfg.dt))


def lbm_step(state: LatticeState, params: FhnParams, cfg: LbmConfig,
             react: bool = True) -> LatticeState:
    """One collide-react-stream cycle.  ``react=False`` switches the kinetics off."""
    relax_u = relaxation_coefficient(params.d_u, cfg.dt, cfg.dx)
    relax_v = relaxation_coefficient(params.d_v, cfg.dt, cfg.dx)
    eps = np.asarray(params.epsilon, dtype=float)
    f_u, f_v = _advance(state.f_u, state.f_v, eps, params, cfg, relax_u, relax_v, react)
    t = state.t + cfg.dt
    if not (np.all(np.abs(f_u) < cfg.overflow_guard) and np.all(np.abs(f_v) < cfg.overflow_guard)):
        raise LbmDivergence("distribution exceeded overflow guard", t)
    return LatticeState(f_u, f_v, t)


def run_lbm_batch(ics: list[FieldState], epsilons, params: FhnParams, cfg: LbmConfig,
                  ic_params: list[InitialConditionParams | None] | None = None,
                  ) -> list["Trajectory | LbmDivergence"]:
    """Simulate several independent runs in lock-step.

    Returns one entry per run: a :class:`Trajectory`, or the
    :class:`LbmDivergence` that stopped it.  A diverged run does not affect
    the others.
    """
    n = len(ics)
    epsilons = np.asarray(epsilons, dtype=float).reshape(n)
    ic_params = list(ic_params) if ic_params is not None else [None] * n
    relax_u = relaxation_coefficient(params.d_u, cfg.dt, cfg.dx)
    relax_v = relaxation_coefficient(params.d_v, cfg.dt, cfg.dx)
    if cfg.t_end < 0:
        raise ValueError("t_end must be non-negative")

    w = cfg.weights[:, None]
    u0 = np.stack([ic.u for ic in ics])
    v0 = np.stack([ic.v for ic in ics])
    if u0.shape[1] != cfg.grid.m:
        raise ValueError(f"initial conditions have {u0.shape[1]} points, lattice has {cfg.grid.m}")
    f_u = w * u0[:, None, :]
    f_v = w * v0[:, None, :]

    n_records = int(np.floor(cfg.t_end / cfg.record_every + 1e-9))
    rec_u = np.empty((n_records + 1, n, cfg.grid.m))
    rec_v = np.empty_like(rec_u)
    rec_u[0], rec_v[0] = u0, v0
    alive = np.ones(n, dtype=bool)
    failures: dict[int, LbmDivergence] = {}

    for r in range(1, n_records + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(cfg.steps_per_record):
                f_u, f_v = _advance(f_u, f_v, epsilons, params, cfg, relax_u, relax_v)
        bad = alive & ~(np.all(np.abs(f_u) < cfg.overflow_guard, axis=(1, 2))
                        & np.all(np.abs(f_v) < cfg.overflow_guard, axis=(1, 2)))
        if bad.any():
            t_bad = r * cfg.record_every
            for i in np.flatnonzero(bad):
                failures[i] = LbmDivergence(f"run {i} (eps={epsilons[i]:g}) diverged", t_bad)
                log.warning("%s", failures[i])
            alive &= ~bad
            f_u[bad] = 0.0
            f_v[bad] = 0.0
        rec_u[r] = f_u.sum(axis=1)
        rec_v[r] = f_v.sum(axis=1)

    times = cfg.record_every * np.arange(n_records + 1)
    out: list[Trajectory | LbmDivergence] = []
    for i in range(n):
        if i in failures:
            out.append(failures[i])
        else:
            out.append(Trajectory(times, rec_u[:, i].copy(), rec_v[:, i].copy(),
                                  float(epsilons[i]), ic_params[i]))
    return out


def run_lbm(ic: FieldState, params: FhnParams, cfg: LbmConfig,
            ic_params: InitialConditionParams | None = None) -> Trajectory:
    """Simulate one run, recording the zeroth moments every ``record_every``."""
    result = run_lbm_batch([ic], [params.epsilon], params, cfg, [ic_params])[0]
    if isinstance(result, LbmDivergence):
        raise result
    return result
