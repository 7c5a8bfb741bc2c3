import numpy as np
import pytest

from coarsebif.continuation import (BranchPoint, ContinuationConfig, _Metric, arclength_constraint,
                                    corrector_solve, detect_fold, detect_hopf, fold_locations,
                                    leading_eigenvalues, natural_newton, read_branch_table,
                                    trace_branch, write_branch)
from coarsebif.core_model import FieldState, InitialConditionParams, SpatialGrid, initial_profile
from coarsebif.fd_reference import FdProvider, NewtonError


class ParabolaProvider:
    """``a^2 + eps - 1 = 0``, ``-b = 0``: a fold at ``eps = 1`` where the real eigenvalue ``2a`` changes sign."""

    m = 1

    def residual(self, x, eps):
        return np.array([x[0] ** 2 + eps - 1.0, -x[1]])

    def jacobian_blocks(self, x, eps):
        return np.array([[2.0 * x[0], 0.0], [0.0, -1.0]]), np.array([1.0, 0.0])


class MonotoneProvider:
    m = 1

    def residual(self, x, eps):
        return np.array([x[0] - eps, -x[1]])

    def jacobian_blocks(self, x, eps):
        return np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([-1.0, 0.0])


class LinearHopfProvider:
    """Trivial steady state with eigenvalues ``(eps - 0.5) +- i``."""

    m = 1

    def _a(self, eps):
        return np.array([[eps - 0.5, -1.0], [1.0, eps - 0.5]])

    def residual(self, x, eps):
        return self._a(eps) @ x

    def jacobian_blocks(self, x, eps):
        return self._a(eps), np.asarray(x, dtype=float).copy()


def _residuals(branch, provider):
    return [np.abs(provider.residual(p.state.stacked(), p.epsilon)).max() for p in branch]


@pytest.fixture(scope="module")
def parabola_branch():
    cfg = ContinuationConfig(ds=0.02, tol=1e-10, eps_bounds=(0.2, 1.2), max_steps=400)
    return trace_branch(0.5, ParabolaProvider(), cfg, np.array([np.sqrt(0.5), 0.0])), cfg


def test_accepted_points_are_converged(parabola_branch):
    branch, cfg = parabola_branch
    assert len(branch) > 20
    assert max(_residuals(branch, ParabolaProvider())) <= cfg.tol


def test_branch_passes_the_fold(parabola_branch):
    branch, _ = parabola_branch
    a = np.array([p.state.u[0] for p in branch])
    assert a.min() < -0.5 < 0.5 < a.max()
    assert branch.epsilon.max() <= 1.0 + 1e-12
    assert branch.termination == ("left_window", "left_window")


def test_arclength_is_increasing(parabola_branch):
    branch, _ = parabola_branch
    assert branch.arclength[0] == 0.0
    assert np.all(np.diff(branch.arclength) > 0)


def test_consecutive_points_satisfy_secant_constraint():
    prov = ParabolaProvider()
    cfg = ContinuationConfig(ds=0.05, tol=1e-11)
    metric = _Metric(1)
    y_prev = np.array([np.sqrt(0.5), 0.0, 0.5])
    y_last = np.array([np.sqrt(0.49), 0.0, 0.51])
    for _ in range(30):
        t = (y_last - y_prev) / metric.norm(y_last - y_prev)
        y_new, _, rn = corrector_solve(y_last + cfg.ds * t, y_last, t, cfg.ds, prov, cfg)
        assert rn <= cfg.tol
        assert abs(arclength_constraint(y_new, y_last, t, cfg.ds, metric)) <= cfg.tol
        y_prev, y_last = y_last, y_new
    assert y_last[0] < 0  # went around the fold


def test_predictor_on_branch_converges_immediately():
    prov = ParabolaProvider()
    cfg = ContinuationConfig(ds=0.05, tol=1e-11)
    metric = _Metric(1)
    y_prev = np.array([np.sqrt(0.5), 0.0, 0.5])
    y_last = np.array([np.sqrt(0.49), 0.0, 0.51])
    t = (y_last - y_prev) / metric.norm(y_last - y_prev)
    exact, _, _ = corrector_solve(y_last + cfg.ds * t, y_last, t, cfg.ds, prov, cfg)
    _, iters, _ = corrector_solve(exact, y_last, t, cfg.ds, prov, cfg)
    assert iters <= 2


def test_fold_found_on_parabola_branch(parabola_branch):
    branch, _ = parabola_branch
    folds = detect_fold(branch)
    assert len(folds) == 1
    assert folds[0].epsilon == pytest.approx(1.0, abs=1e-4)
    assert abs(folds[0].mean_u) < 0.1


def test_stability_flips_only_at_the_fold(parabola_branch):
    branch, _ = parabola_branch
    stable = np.array([p.stable for p in branch])
    flips = np.flatnonzero(stable[1:] != stable[:-1])
    fold = detect_fold(branch)[0]
    assert flips.size == 1
    assert abs(flips[0] - fold.index) <= 1


def test_fold_on_sampled_parabola():
    s = np.linspace(-0.3, 0.3, 7)
    pts = [BranchPoint(FieldState(np.array([si]), np.array([0.0])), 1.0 - si**2, si, np.array([-1.0]))
           for si in s]
    folds = detect_fold(pts)
    assert len(folds) == 1
    assert folds[0].epsilon == pytest.approx(1.0, abs=1e-6)
    assert folds[0].arclength == pytest.approx(0.0, abs=1e-6)


def test_fold_on_shifted_parabola_off_sample():
    s = np.linspace(0.0, 1.0, 11)
    eps = 2.0 - 3.0 * (s - 0.437) ** 2
    (idx, s_star, e_star), = fold_locations(s, eps)
    assert s_star == pytest.approx(0.437, abs=1e-12)
    assert e_star == pytest.approx(2.0, abs=1e-12)


def test_monotone_branch_has_no_fold():
    cfg = ContinuationConfig(ds=0.05, tol=1e-10, eps_bounds=(0.0, 1.0))
    branch = trace_branch(0.5, MonotoneProvider(), cfg, np.array([0.5, 0.0]))
    assert len(branch) > 10
    assert detect_fold(branch) == []
    assert np.all(np.diff(branch.epsilon) > 0)


def test_too_few_points_give_no_fold():
    assert detect_fold([]) == []


def test_real_eigenvalues_give_no_hopf(parabola_branch):
    branch, cfg = parabola_branch
    assert detect_hopf(branch, ParabolaProvider(), cfg) == []


@pytest.fixture(scope="module")
def hopf_branch():
    cfg = ContinuationConfig(ds=0.03, tol=1e-10, eps_bounds=(0.1, 0.9))
    prov = LinearHopfProvider()
    return trace_branch(0.3, prov, cfg, np.zeros(2)), prov, cfg


def test_linear_hopf_located(hopf_branch):
    branch, prov, cfg = hopf_branch
    hopf = detect_hopf(branch, prov, cfg)
    assert len(hopf) == 1
    assert hopf[0].epsilon == pytest.approx(0.5, abs=1e-5)
    assert hopf[0].frequency == pytest.approx(1.0, abs=1e-9)


def test_stability_flips_only_at_hopf(hopf_branch):
    branch, prov, cfg = hopf_branch
    stable = np.array([p.stable for p in branch])
    flips = np.flatnonzero(stable[1:] != stable[:-1])
    (hopf,) = detect_hopf(branch, prov, cfg)
    np.testing.assert_array_equal(flips, [hopf.index])
    assert stable[0] and not stable[-1]


def test_halved_step_traces_same_curve():
    prov = ParabolaProvider()
    kw = dict(tol=1e-11, eps_bounds=(0.3, 0.99), max_steps=1000)
    coarse = trace_branch(0.5, prov, ContinuationConfig(ds=0.02, **kw), np.array([np.sqrt(0.5), 0.0]))
    fine = trace_branch(0.5, prov, ContinuationConfig(ds=0.01, **kw), np.array([np.sqrt(0.5), 0.0]))
    for p in coarse:
        q = min(fine, key=lambda q: abs(q.epsilon - p.epsilon) + abs(q.state.u[0] - p.state.u[0]))
        if abs(p.epsilon - 1.0) < 0.05:
            continue  # near the fold, epsilon does not identify the point
        x, _ = natural_newton(prov, q.state.stacked(), p.epsilon, kw["tol"])
        assert np.abs(x - p.state.stacked()).max() <= 10 * kw["tol"]


def test_natural_newton_converges_and_fails_cleanly():
    prov = ParabolaProvider()
    x, it = natural_newton(prov, np.array([1.0, 0.3]), 0.75, tol=1e-12)
    assert x[0] == pytest.approx(0.5, abs=1e-12)
    assert it > 0
    with pytest.raises(NewtonError):
        natural_newton(prov, np.array([1.0, 0.0]), 1.5, tol=1e-12, max_iter=20)


def test_leading_eigenvalues_ordered_by_real_part():
    jac = np.diag([-3.0, 1.0, -0.5, 2.0])
    np.testing.assert_array_equal(leading_eigenvalues(jac, 3), [2.0, 1.0, -0.5])


def test_config_validation():
    with pytest.raises(ValueError):
        ContinuationConfig(ds=0.0)
    with pytest.raises(ValueError):
        ContinuationConfig(tol=0.0)
    with pytest.raises(ValueError):
        ContinuationConfig(eps_bounds=(0.5, 0.5))


def test_trace_rejects_bad_start():
    cfg = ContinuationConfig(eps_bounds=(0.2, 0.8))
    with pytest.raises(ValueError):
        trace_branch(0.9, MonotoneProvider(), cfg, np.zeros(2))
    with pytest.raises(ValueError):
        trace_branch(0.5, MonotoneProvider(), cfg, np.zeros(3))


def test_one_direction_only():
    cfg = ContinuationConfig(ds=0.05, tol=1e-10, eps_bounds=(0.0, 1.0))
    branch = trace_branch(0.5, MonotoneProvider(), cfg, np.array([0.5, 0.0]), both_directions=False)
    assert branch.epsilon.min() == 0.5
    assert branch.termination[0] == "not_traced"


def test_branch_table_roundtrip(tmp_path, parabola_branch):
    branch, _ = parabola_branch
    write_branch(branch, tmp_path / "b.csv", tmp_path / "p.csv", n_eigen=2)
    tab = read_branch_table(tmp_path / "b.csv")
    np.testing.assert_array_equal(tab["epsilon"], branch.epsilon)
    np.testing.assert_array_equal(tab["stable"], [float(p.stable) for p in branch])
    np.testing.assert_array_equal(tab["mean_u"], [p.state.u.mean() for p in branch])
    prof = read_branch_table(tmp_path / "p.csv")
    np.testing.assert_array_equal(prof["u0"], [p.state.u[0] for p in branch])


# --------------------------------------------------------------------------
# finite-difference provider on a coarse grid, away from the fold

@pytest.fixture(scope="module")
def fd_window():
    grid = SpatialGrid(m=60)
    prov = FdProvider(grid)
    guess = initial_profile(InitialConditionParams(1.0, 1.0, 10.0, 0.0), grid)
    kw = dict(tol=1e-9, eps_bounds=(0.3, 0.6), n_eigen=4)
    a = trace_branch(0.4, prov, ContinuationConfig(ds=0.02, **kw), guess)
    b = trace_branch(0.4, prov, ContinuationConfig(ds=0.01, **kw), guess)
    return grid, prov, a, b, kw


def test_fd_branch_points_converged(fd_window):
    grid, prov, a, _, kw = fd_window
    assert max(_residuals(a, prov)) <= kw["tol"]
    for p in a:
        assert p.mean_u == float(np.mean(p.state.u))


def test_fd_step_halving_agrees_pointwise(fd_window):
    grid, prov, a, b, kw = fd_window
    for p in a:
        # re-solve at the exact epsilon of p starting from the nearest fine-step point
        q = min(b, key=lambda q: abs(q.epsilon - p.epsilon))
        x, _ = natural_newton(prov, q.state.stacked(), p.epsilon, kw["tol"])
        assert np.abs(x - p.state.stacked()).max() <= 10 * kw["tol"]


def test_fd_start_matches_newton_solution(fd_window):
    grid, prov, a, _, kw = fd_window
    start = min(a, key=lambda p: abs(p.epsilon - 0.4))
    x, _ = natural_newton(prov, initial_profile(InitialConditionParams(1.0, 1.0, 10.0, 0.0), grid).stacked(),
                          0.4, kw["tol"])
    assert start.epsilon == 0.4
    assert np.mean(x[:grid.m]) == pytest.approx(start.mean_u, abs=1e-8)
    assert start.stable
