"""FitzHugh-Nagumo problem definition, grids and initial conditions.

Everything downstream (lattice simulator, finite differences, feature
extraction, learned right-hand sides) shares the types and stencils defined
here so that the discretisation of the boundary is consistent everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# v0 = IC_COUPLING * u0 for the random initial conditions
IC_COUPLING = 0.12

IC_RANGES = {
    "w": (0.8, 1.2),
    "alpha": (0.5, 1.0),
    "c": (2.0, 18.0),
    "beta": (-0.4, 0.0),
}

EPS_INTERVAL = (0.005, 0.955)


@dataclass(frozen=True)
class FhnParams:
    alpha0: float = -0.03
    alpha1: float = 2.0
    d_u: float = 1.0
    d_v: float = 4.0
    epsilon: float = 0.5

    def __post_init__(self):
        if not (self.d_u > 0 and self.d_v > 0):
            raise ValueError("diffusivities must be positive")

    def with_epsilon(self, epsilon: float) -> "FhnParams":
        return FhnParams(self.alpha0, self.alpha1, self.d_u, self.d_v, float(epsilon))


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform 1D grid ``x_q = x0 + q*dx``, ``q = 0..m-1``.

    ``wall`` says where the zero-flux walls sit relative to the grid:

    * ``"node"`` -- the walls coincide with the first and last node; the
      mirrored ghost values are ``u[-1] = u[1]`` and ``u[m] = u[m-2]``.
      This is the finite-difference grid.
    * ``"cell"`` -- the walls sit half a spacing outside the end nodes, as
      for a lattice with half-way bounce-back; ghosts are ``u[-1] = u[0]``
      and ``u[m] = u[m-1]``.
    """

    x0: float = 0.0
    x_end: float = 20.0
    m: int = 200
    wall: str = "node"

    def __post_init__(self):
        if self.m < 3:
            raise ValueError(f"grid needs at least 3 points, got m={self.m}")
        if not self.x_end > self.x0:
            raise ValueError("x_end must exceed x0")
        if self.wall not in ("node", "cell"):
            raise ValueError(f"unknown wall placement {self.wall!r}")

    @property
    def dx(self) -> float:
        return (self.x_end - self.x0) / (self.m - 1)

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.m)

    @property
    def domain(self) -> tuple[float, float]:
        """Physical interval bounded by the walls."""
        if self.wall == "node":
            return self.x0, self.x_end
        half = 0.5 * self.dx
        return self.x0 - half, self.x_end + half

    @classmethod
    def lattice(cls, x0: float = 0.0, x_end: float = 20.0, m: int = 40) -> "SpatialGrid":
        """Cell-centred grid of ``m`` lattice nodes whose walls are at x0 and x_end."""
        dx = (x_end - x0) / m
        return cls(x0 + 0.5 * dx, x_end - 0.5 * dx, m, wall="cell")


@dataclass(frozen=True)
class InitialConditionParams:
    w: float
    alpha: float
    c: float
    beta: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w, self.alpha, self.c, self.beta)


@dataclass(frozen=True)
class FieldState:
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if u.shape != v.shape or u.ndim != 1:
            raise ValueError(f"u and v must be 1D of equal length, got {u.shape} and {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def m(self) -> int:
        return self.u.size

    def stacked(self) -> np.ndarray:
        """State as a single vector ``[u; v]``."""
        return np.concatenate([self.u, self.v])

    @classmethod
    def from_stacked(cls, x: np.ndarray, t: float = 0.0) -> "FieldState":
        m = x.size // 2
        return cls(x[:m].copy(), x[m:].copy(), t)


# --------------------------------------------------------------------------
# stencils

def _ghosts(f: np.ndarray, wall: str) -> tuple[np.ndarray, np.ndarray]:
    if wall == "node":
        return f[..., 1], f[..., -2]
    return f[..., 0], f[..., -1]


def padded(f: np.ndarray, wall: str = "node") -> np.ndarray:
    """Append mirrored ghost values on both ends of the last axis."""
    left, right = _ghosts(f, wall)
    return np.concatenate([left[..., None], f, right[..., None]], axis=-1)


def first_derivative(f: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    g = padded(np.asarray(f, dtype=float), grid.wall)
    return (g[..., 2:] - g[..., :-2]) / (2.0 * grid.dx)


def second_derivative(f: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    g = padded(np.asarray(f, dtype=float), grid.wall)
    return (g[..., 2:] - 2.0 * g[..., 1:-1] + g[..., :-2]) / grid.dx**2


# --------------------------------------------------------------------------
# operations

def make_epsilon_grid(n_eps: int, lo: float = EPS_INTERVAL[0], hi: float = EPS_INTERVAL[1]) -> np.ndarray:
    """Chebyshev-Gauss-Lobatto nodes on ``[lo, hi]``, ascending, endpoints included."""
    if n_eps < 2:
        raise ValueError(f"need at least 2 nodes, got {n_eps}")
    if not lo < hi:
        raise ValueError(f"empty interval [{lo}, {hi}]")
    k = np.arange(n_eps)
    nodes = 0.5 * (lo + hi) - 0.5 * (hi - lo) * np.cos(np.pi * k / (n_eps - 1))
    nodes[0], nodes[-1] = lo, hi
    return nodes


def initial_profile(ic: InitialConditionParams, grid: SpatialGrid,
                    coupling: float = IC_COUPLING) -> FieldState:
    u0 = ic.w * np.tanh(ic.alpha * (grid.x - ic.c)) + ic.beta
    return FieldState(u0, coupling * u0, 0.0)


def sample_initial_condition(rng: np.random.Generator, grid: SpatialGrid,
                             coupling: float = IC_COUPLING) -> tuple[InitialConditionParams, FieldState]:
    """Draw ``(w, alpha, c, beta)`` uniformly and build the tanh profile."""
    draws = {name: rng.uniform(lo, hi) for name, (lo, hi) in IC_RANGES.items()}
    ic = InitialConditionParams(**draws)
    return ic, initial_profile(ic, grid, coupling)


def reaction_terms(u, v, params: FhnParams):
    ru = u - u**3 - v
    rv = params.epsilon * (u - params.alpha1 * v - params.alpha0)
    return ru, rv


def fhn_rhs_reference(state: FieldState, params: FhnParams,
                      grid: SpatialGrid) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form FHN right-hand side with 3-point diffusion stencils."""
    if state.m != grid.m:
        raise ValueError(f"state has {state.m} points, grid has {grid.m}")
    ru, rv = reaction_terms(state.u, state.v, params)
    u_t = params.d_u * second_derivative(state.u, grid) + ru
    v_t = params.d_v * second_derivative(state.v, grid) + rv
    return u_t, v_t
