"""Pseudo-arclength continuation of steady states with fold and Hopf detection.

Works with any provider exposing ``m``, ``residual(x, eps)`` and
``jacobian_blocks(x, eps) -> (dF/dx, dF/deps)``.  Arclength is measured in a
weighted norm, ``|y|^2 = (sum(u^2) + sum(v^2)) / m + eps^2``, so the step size
does not depend on the number of grid points.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core_model import FieldState
from .fd_reference import NewtonError
from .io_utils import atomic_savetxt, read_columns

log = logging.getLogger(__name__)


class RhsProvider(Protocol):
    m: int

    def residual(self, x: np.ndarray, eps: float) -> np.ndarray: ...

    def jacobian_blocks(self, x: np.ndarray, eps: float): ...


@dataclass(frozen=True)
class ContinuationConfig:
    ds: float = 0.01
    tol: float = 1e-8
    max_steps: int = 2000
    eps_bounds: tuple[float, float] = (0.005, 1.05)
    delta: float = 1e-6
    ds_max: float = 0.05
    bootstrap_step: float = 1e-3
    max_corrector_iter: int = 10
    max_halvings: int = 6
    fast_iterations: int = 3
    fast_streak: int = 5
    n_eigen: int = 8
    imag_threshold: float = 1e-6
    hopf_tol: float = 1e-5

    def __post_init__(self):
        if self.ds == 0:
            raise ValueError("ds must be nonzero")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not self.eps_bounds[0] < self.eps_bounds[1]:
            raise ValueError("eps_bounds must be an increasing pair")


@dataclass
class BranchPoint:
    state: FieldState
    epsilon: float
    arclength: float
    leading_eigenvalues: np.ndarray
    residual_norm: float = 0.0
    iterations: int = 0
    mean_u: float = field(init=False)
    mean_v: float = field(init=False)

    def __post_init__(self):
        self.mean_u = float(np.mean(self.state.u))
        self.mean_v = float(np.mean(self.state.v))

    @property
    def stable(self) -> bool:
        return bool(self.leading_eigenvalues.size == 0 or np.max(self.leading_eigenvalues.real) < 0)

    @property
    def stability(self) -> str:
        return "stable" if self.stable else "unstable"

    def vector(self) -> np.ndarray:
        return np.concatenate([self.state.stacked(), [self.epsilon]])


@dataclass(frozen=True)
class FoldPoint:
    epsilon: float
    arclength: float
    mean_u: float
    index: int


@dataclass(frozen=True)
class HopfPoint:
    epsilon: float
    frequency: float
    index: int
    mean_u: float


def _solve(a, b):
    if sp.issparse(a):
        x = spla.spsolve(a.tocsc(), b)
    else:
        x = np.linalg.solve(a, b)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("singular linear system")
    return x


def _dense(a) -> np.ndarray:
    return a.toarray() if sp.issparse(a) else np.asarray(a)


def leading_eigenvalues(jac, k: int = 8) -> np.ndarray:
    """The ``k`` eigenvalues with largest real part, in decreasing order of real part."""
    ev = np.linalg.eigvals(_dense(jac))
    order = np.lexsort((-ev.imag, -ev.real))
    return ev[order[:k]]


def natural_newton(provider: RhsProvider, x0: np.ndarray, eps: float, tol: float = 1e-8,
                   max_iter: int = 50) -> tuple[np.ndarray, int]:
    """Newton solve of ``F(x, eps) = 0`` at fixed ``eps`` with a halving line search."""
    x = np.array(x0, dtype=float)
    r = provider.residual(x, eps)
    rn = np.abs(r).max()
    for it in range(max_iter + 1):
        if rn <= tol:
            return x, it
        if it == max_iter:
            break
        try:
            dx = _solve(provider.jacobian_blocks(x, eps)[0], -r)
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            raise NewtonError(f"singular Jacobian at eps={eps:g}", x, rn) from exc
        step = 1.0
        while True:
            x_new = x + step * dx
            r_new = provider.residual(x_new, eps)
            rn_new = np.abs(r_new).max()
            if rn_new < rn or step < 1e-6:
                break
            step *= 0.5
        x, r, rn = x_new, r_new, rn_new
    raise NewtonError(f"no convergence at eps={eps:g} after {max_iter} iterations", x, rn)


class _Metric:
    def __init__(self, m: int):
        self.w = np.concatenate([np.full(2 * m, 1.0 / m), [1.0]])

    def dot(self, a, b) -> float:
        return float(np.sum(self.w * a * b))

    def norm(self, a) -> float:
        return float(np.sqrt(self.dot(a, a)))


def arclength_constraint(y: np.ndarray, y_last: np.ndarray, tangent: np.ndarray, ds: float,
                         metric: _Metric) -> float:
    """Secant normalisation ``N = <t, y - y_last> - ds``."""
    return metric.dot(tangent, y - y_last) - ds


def corrector_solve(predictor: np.ndarray, y_last: np.ndarray, tangent: np.ndarray, ds: float,
                    provider: RhsProvider, cfg: ContinuationConfig) -> tuple[np.ndarray, int, float]:
    """Newton on the bordered system ``[F(x, eps); N(x, eps)] = 0``.

    Returns the converged extended vector, the iteration count and the
    final residual norm; raises :class:`NewtonError` on failure.
    """
    metric = _Metric(provider.m)
    n = y_last.size - 1
    y = predictor.copy()
    border = (metric.w * tangent)[None, :]
    for it in range(cfg.max_corrector_iter + 1):
        x, eps = y[:n], y[n]
        res = np.concatenate([provider.residual(x, eps),
                              [arclength_constraint(y, y_last, tangent, ds, metric)]])
        rn = np.abs(res).max()
        if not np.isfinite(rn):
            raise NewtonError("non-finite residual in corrector", y, rn)
        if rn <= cfg.tol:
            return y, it, rn
        if it == cfg.max_corrector_iter:
            break
        jac, d_eps = provider.jacobian_blocks(x, eps)
        a = sp.bmat([[sp.csc_matrix(jac), sp.csc_matrix(d_eps[:, None])],
                     [sp.csc_matrix(border[:, :n]), sp.csc_matrix(border[:, n:])]], format="csc")
        try:
            y = y - _solve(a, res)
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            raise NewtonError("singular bordered Jacobian", y, rn) from exc
    raise NewtonError(f"corrector did not converge in {cfg.max_corrector_iter} iterations", y, rn)


def _make_point(provider, y, s, cfg, rn=0.0, iters=0) -> BranchPoint:
    n = y.size - 1
    jac = provider.jacobian_blocks(y[:n], y[n])[0]
    return BranchPoint(FieldState.from_stacked(y[:n]), float(y[n]), s,
                       leading_eigenvalues(jac, cfg.n_eigen), rn, iters)


def _in_window(eps, cfg) -> bool:
    return cfg.eps_bounds[0] <= eps <= cfg.eps_bounds[1]


def _march(provider, y_prev, y_last, cfg: ContinuationConfig, s0: float, metric: _Metric):
    """Continue from the chord ``y_prev -> y_last`` until a stop condition."""
    points = []
    ds = abs(cfg.ds)
    fast = 0
    s = s0
    reason = "max_steps"
    for _ in range(cfg.max_steps):
        tangent = y_last - y_prev
        tangent /= metric.norm(tangent)
        for attempt in range(cfg.max_halvings + 1):
            try:
                y_new, iters, rn = corrector_solve(y_last + ds * tangent, y_last, tangent, ds,
                                                   provider, cfg)
                break
            except NewtonError as exc:
                log.debug("corrector failed with ds=%.3g: %s", ds, exc)
                ds *= 0.5
        else:
            reason = "corrector_failure"
            log.warning("branch terminated at eps=%.6g: corrector failed after %d halvings",
                        y_last[-1], cfg.max_halvings)
            break
        if not _in_window(y_new[-1], cfg):
            reason = "left_window"
            break
        s += metric.norm(y_new - y_last)
        points.append(_make_point(provider, y_new, s, cfg, rn, iters))
        y_prev, y_last = y_last, y_new
        if iters <= cfg.fast_iterations:
            fast += 1
            if fast >= cfg.fast_streak:
                ds, fast = min(2.0 * ds, cfg.ds_max), 0
        else:
            fast = 0
    return points, reason


@dataclass
class Branch:
    points: list[BranchPoint]
    termination: tuple[str, str]

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def __getitem__(self, i):
        return self.points[i]

    @property
    def epsilon(self) -> np.ndarray:
        return np.array([p.epsilon for p in self.points])

    @property
    def arclength(self) -> np.ndarray:
        return np.array([p.arclength for p in self.points])


def trace_branch(start_eps: float, provider: RhsProvider, cfg: ContinuationConfig,
                 initial_guess: np.ndarray | FieldState, both_directions: bool = True) -> Branch:
    """Trace the solution branch through ``start_eps``.

    Two natural-parameter solves at ``start_eps`` and ``start_eps +
    bootstrap_step`` give the first secant.  The march proceeds in the
    direction of increasing epsilon (or ``sign(ds)``), and with
    ``both_directions`` also backwards; the result is ordered by arclength.
    """
    if not _in_window(start_eps, cfg):
        raise ValueError(f"start_eps={start_eps} lies outside eps_bounds={cfg.eps_bounds}")
    x0 = initial_guess.stacked() if isinstance(initial_guess, FieldState) else np.asarray(initial_guess, float)
    if x0.size != 2 * provider.m:
        raise ValueError(f"initial guess has length {x0.size}, expected {2 * provider.m}")
    metric = _Metric(provider.m)
    sign = 1.0 if cfg.ds > 0 else -1.0
    e1 = start_eps + sign * cfg.bootstrap_step
    xa, _ = natural_newton(provider, x0, start_eps, cfg.tol)
    xb, _ = natural_newton(provider, xa, e1, cfg.tol)
    ya = np.concatenate([xa, [start_eps]])
    yb = np.concatenate([xb, [e1]])

    backward, why_back = [], "not_traced"
    if both_directions:
        backward, why_back = _march(provider, yb, ya, cfg, 0.0, metric)
    forward, why_fwd = _march(provider, ya, yb, cfg, metric.norm(yb - ya), metric)
    head = [_make_point(provider, ya, 0.0, cfg)]
    if _in_window(e1, cfg):
        head.append(_make_point(provider, yb, metric.norm(yb - ya), cfg))
    else:
        forward = []
    # backward points carry distances measured away from the start
    for p in backward:
        p.arclength = -p.arclength
    points = backward[::-1] + head + forward
    offset = points[0].arclength
    for p in points:
        p.arclength -= offset
    return Branch(points, (why_back, why_fwd))


# --------------------------------------------------------------------------
# critical points

def fold_locations(s: np.ndarray, eps: np.ndarray) -> list[tuple[int, float, float]]:
    """Extrema of ``eps(s)``: ``(index, s*, eps*)`` from a parabola through three samples."""
    s = np.asarray(s, dtype=float)
    eps = np.asarray(eps, dtype=float)
    out = []
    de = np.diff(eps)
    for i in range(1, de.size):
        if de[i - 1] * de[i] < 0 or (de[i] == 0 and i + 1 < de.size and de[i - 1] * de[i + 1] < 0):
            c2, c1, c0 = np.polyfit(s[i - 1:i + 2] - s[i], eps[i - 1:i + 2], 2)
            if c2 == 0:
                out.append((i, float(s[i]), float(eps[i])))
                continue
            s_star = -c1 / (2 * c2)
            out.append((i, float(s[i] + s_star), float(c0 - c1**2 / (4 * c2))))
    return out


def detect_fold(branch) -> list[FoldPoint]:
    pts = list(branch)
    if len(pts) < 3:
        return []
    s = np.array([p.arclength for p in pts])
    eps = np.array([p.epsilon for p in pts])
    return [FoldPoint(e, ss, pts[i].mean_u, i) for i, ss, e in fold_locations(s, eps)]


def _complex_front(ev: np.ndarray, threshold: float):
    cplx = ev[np.abs(ev.imag) >= threshold]
    if cplx.size == 0:
        return None
    return cplx[np.argmax(cplx.real)]


def detect_hopf(branch, provider: RhsProvider, cfg: ContinuationConfig) -> list[HopfPoint]:
    """Crossings of the imaginary axis by the rightmost complex pair, refined by bisection."""
    pts = list(branch)
    out = []
    for i in range(len(pts) - 1):
        a, b = pts[i], pts[i + 1]
        la = _complex_front(a.leading_eigenvalues, cfg.imag_threshold)
        lb = _complex_front(b.leading_eigenvalues, cfg.imag_threshold)
        if la is None or lb is None or np.sign(la.real) == np.sign(lb.real):
            continue
        ya, yb = a.vector(), b.vector()

        def probe(theta):
            guess = (1 - theta) * ya + theta * yb
            eps = guess[-1]
            x, _ = natural_newton(provider, guess[:-1], eps, cfg.tol)
            ev = leading_eigenvalues(provider.jacobian_blocks(x, eps)[0], cfg.n_eigen)
            lam = _complex_front(ev, cfg.imag_threshold)
            return (la.real if lam is None else lam.real), lam, x

        lo, hi, f_lo = 0.0, 1.0, la.real
        lam, x = lb, b.state.stacked()
        for _ in range(60):
            if abs(hi - lo) * abs(b.epsilon - a.epsilon) <= cfg.hopf_tol:
                break
            mid = 0.5 * (lo + hi)
            f_mid, lam_mid, x_mid = probe(mid)
            if np.sign(f_mid) == np.sign(f_lo):
                lo, f_lo = mid, f_mid
            else:
                hi, lam, x = mid, (lam_mid if lam_mid is not None else lam), x_mid
        theta = 0.5 * (lo + hi)
        eps_h = (1 - theta) * a.epsilon + theta * b.epsilon
        out.append(HopfPoint(float(eps_h), float(abs(lam.imag)), i, float(np.mean(x[:provider.m]))))
    return out


# --------------------------------------------------------------------------
# persistence

def branch_columns(n_eigen: int) -> list[str]:
    cols = ["s", "epsilon", "mean_u", "mean_v", "stable"]
    for k in range(1, n_eigen + 1):
        cols += [f"eig{k}_re", f"eig{k}_im"]
    return cols


def write_branch(branch, path, profiles_path=None, n_eigen: int = 8) -> None:
    pts = list(branch)
    rows = []
    for p in pts:
        ev = np.full(n_eigen, np.nan, dtype=complex)
        ev[:min(n_eigen, p.leading_eigenvalues.size)] = p.leading_eigenvalues[:n_eigen]
        row = [p.arclength, p.epsilon, p.mean_u, p.mean_v, float(p.stable)]
        for e in ev:
            row += [e.real, e.imag]
        rows.append(row)
    data = np.array(rows).reshape(len(pts), -1)
    fmt = ["%.17g"] * 4 + ["%d"] + ["%.17g"] * (2 * n_eigen)
    atomic_savetxt(path, data, fmt, ",".join(branch_columns(n_eigen)))
    if profiles_path is not None:
        m = pts[0].state.m if pts else 0
        header = ",".join(["index", "epsilon"] + [f"u{j}" for j in range(m)] + [f"v{j}" for j in range(m)])
        prof = np.array([[i, p.epsilon, *p.state.u, *p.state.v] for i, p in enumerate(pts)]).reshape(len(pts), -1)
        atomic_savetxt(profiles_path, prof, ["%d"] + ["%.17g"] * (2 * m + 1), header)


def read_branch_table(path) -> dict[str, np.ndarray]:
    return read_columns(path)


