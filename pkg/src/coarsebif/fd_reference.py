"""Central finite-difference discretisation of the FHN steady-state problem.

The unknown vector is ``x = [u_1..u_M, v_1..v_M]``.  Boundary rows keep the
zero-flux condition by mirroring the neighbour into the ghost node, so there
are 2M equations for 2M unknowns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core_model import FhnParams, FieldState, SpatialGrid, fhn_rhs_reference


class NewtonError(RuntimeError):
    def __init__(self, message: str, last_iterate: np.ndarray, residual_norm: float):
        super().__init__(f"{message} (|F|_inf = {residual_norm:.3e})")
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm


@dataclass(frozen=True)
class FdSystem:
    grid: SpatialGrid
    params: FhnParams

    @property
    def m(self) -> int:
        return self.grid.m

    def with_epsilon(self, epsilon: float) -> "FdSystem":
        return FdSystem(self.grid, self.params.with_epsilon(epsilon))


def laplacian_matrix(grid: SpatialGrid) -> sp.csr_matrix:
    """3-point Laplacian with mirrored ghosts folded into the boundary rows."""
    m = grid.m
    lap = sp.diags([np.ones(m - 1), -2.0 * np.ones(m), np.ones(m - 1)], [-1, 0, 1], format="lil")
    if grid.wall == "node":
        lap[0, 1] = 2.0
        lap[m - 1, m - 2] = 2.0
    else:
        lap[0, 0] = -1.0
        lap[m - 1, m - 1] = -1.0
    return (lap / grid.dx**2).tocsr()


def _check(x: np.ndarray, sys: FdSystem) -> None:
    if x.size != 2 * sys.m:
        raise ValueError(f"state vector has length {x.size}, expected {2 * sys.m}")


def fd_residual(state: FieldState | np.ndarray, sys: FdSystem) -> np.ndarray:
    x = state.stacked() if isinstance(state, FieldState) else np.asarray(state, dtype=float)
    _check(x, sys)
    fs = FieldState.from_stacked(x)
    u_t, v_t = fhn_rhs_reference(fs, sys.params, sys.grid)
    return np.concatenate([u_t, v_t])


def fd_jacobian(state: FieldState | np.ndarray, sys: FdSystem) -> sp.csc_matrix:
    """Analytic Jacobian of :func:`fd_residual`.

    The inhibitor diagonal carries ``-eps*alpha1`` (the derivative of
    ``eps*(u - alpha1*v - alpha0)``), not ``-eps*alpha1*v``.
    """
    x = state.stacked() if isinstance(state, FieldState) else np.asarray(state, dtype=float)
    _check(x, sys)
    p = sys.params
    m = sys.m
    u = x[:m]
    lap = laplacian_matrix(sys.grid)
    eye = sp.identity(m, format="csr")
    juu = p.d_u * lap + sp.diags(1.0 - 3.0 * u**2)
    jvv = p.d_v * lap - p.epsilon * p.alpha1 * eye
    return sp.bmat([[juu, -eye], [p.epsilon * eye, jvv]], format="csc")


def fd_eps_derivative(state: FieldState | np.ndarray, sys: FdSystem) -> np.ndarray:
    x = state.stacked() if isinstance(state, FieldState) else np.asarray(state, dtype=float)
    m = sys.m
    u, v = x[:m], x[m:]
    return np.concatenate([np.zeros(m), u - sys.params.alpha1 * v - sys.params.alpha0])


def newton_solve(initial_guess: FieldState | np.ndarray, sys: FdSystem, tol: float = 1e-10,
                 max_iter: int = 50, history: list | None = None) -> FieldState:
    """Newton's method with a halving line search when the residual grows.

    ``history``, if given, receives the residual infinity norm of every iterate.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = (initial_guess.stacked() if isinstance(initial_guess, FieldState)
         else np.array(initial_guess, dtype=float))
    r = fd_residual(x, sys)
    rn = np.abs(r).max()
    if history is not None:
        history.append(rn)
    for _ in range(max_iter):
        if rn <= tol:
            return FieldState.from_stacked(x)
        try:
            dx = spla.spsolve(fd_jacobian(x, sys), -r)
        except RuntimeError as exc:  # singular factorisation
            raise NewtonError(f"singular Jacobian: {exc}", x, rn) from exc
        if not np.all(np.isfinite(dx)):
            raise NewtonError("singular Jacobian", x, rn)
        step = 1.0
        for _ in range(30):
            x_new = x + step * dx
            r_new = fd_residual(x_new, sys)
            rn_new = np.abs(r_new).max()
            if rn_new < rn or step < 1e-6:
                break
            step *= 0.5
        x, r, rn = x_new, r_new, rn_new
        if history is not None:
            history.append(rn)
    if rn <= tol:
        return FieldState.from_stacked(x)
    raise NewtonError(f"no convergence after {max_iter} iterations", x, rn)


def resample(state: FieldState, source: SpatialGrid, target: SpatialGrid | np.ndarray) -> FieldState:
    """Piecewise-linear transfer of a state onto another grid (or onto raw points)."""
    x = target.x if isinstance(target, SpatialGrid) else np.asarray(target, dtype=float)
    return FieldState(np.interp(x, source.x, state.u), np.interp(x, source.x, state.v))


def refinement_errors(epsilon: float, sizes: tuple[int, ...] = (50, 100, 200, 400),
                      seed_state: FieldState | None = None, seed_grid: SpatialGrid | None = None,
                      n_eval: int = 1001, params: FhnParams | None = None,
                      grid: SpatialGrid | None = None) -> dict[str, np.ndarray]:
    """l2 distances ``|u_N - u_2N|`` between steady states on successive grids.

    Every grid is seeded with ``seed_state`` transferred onto it, so all sizes
    land on the same branch.  Without a seed, the tanh front centred in the
    domain is solved on ``seed_grid`` (default: the largest size) first.
    Both solutions are compared on ``n_eval`` uniform points.
    """
    params = (params or FhnParams()).with_epsilon(epsilon)
    base = grid or SpatialGrid()
    sizes = tuple(sorted(sizes))
    if seed_state is None:
        seed_grid = seed_grid or SpatialGrid(base.x0, base.x_end, sizes[-1], base.wall)
        u0 = np.tanh(seed_grid.x - 0.5 * (base.x0 + base.x_end))
        seed_state = newton_solve(FieldState(u0, 0.12 * u0), FdSystem(seed_grid, params))
    elif seed_grid is None:
        raise ValueError("seed_grid is required with seed_state")
    xe = np.linspace(base.x0, base.x_end, n_eval)
    fine = {}
    for m in sizes:
        g = SpatialGrid(base.x0, base.x_end, m, base.wall)
        sol = newton_solve(resample(seed_state, seed_grid, g), FdSystem(g, params))
        fine[m] = resample(sol, g, xe)
    pairs = [(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
    return {
        "sizes": np.array([a for a, _ in pairs]),
        "u": np.array([np.linalg.norm(fine[a].u - fine[b].u) for a, b in pairs]),
        "v": np.array([np.linalg.norm(fine[a].v - fine[b].v) for a, b in pairs]),
    }


class FdProvider:
    """Continuation interface around the finite-difference system."""

    def __init__(self, grid: SpatialGrid, params: FhnParams | None = None):
        self.grid = grid
        self.params = params or FhnParams()

    @property
    def m(self) -> int:
        return self.grid.m

    def _sys(self, eps: float) -> FdSystem:
        return FdSystem(self.grid, self.params.with_epsilon(eps))

    def residual(self, x: np.ndarray, eps: float) -> np.ndarray:
        return fd_residual(x, self._sys(eps))

    def jacobian_blocks(self, x: np.ndarray, eps: float) -> tuple[sp.csc_matrix, np.ndarray]:
        sys = self._sys(eps)
        return fd_jacobian(x, sys), fd_eps_derivative(x, sys)
