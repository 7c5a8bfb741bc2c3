"""Diffusion Maps, parsimonious eigendirections and output-informed feature selection.

For every epsilon slice of the training data the combined input-output
cloud ``(u, v, <time derivative>, u_x, v_x, u_xx, v_xx)`` is embedded; the
leading non-harmonic eigenvectors are found with a local linear LOOCV test,
and every candidate subset of input features is scored by how well a kernel
ridge regressor reproduces those eigenvectors from the subset alone.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl
from scipy.spatial.distance import cdist, pdist

from .features import CANDIDATE_FEATURES, FeatureTable

log = logging.getLogger(__name__)

LOCAL_RIDGE = 1e-10
LOCAL_SCALE_DIVISOR = 3.0


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 10.0
    n_eigen: int = 10
    t_steps: int = 1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.n_eigen < 2:
            raise ValueError("need at least two eigenpairs")


@dataclass
class EmbeddingResult:
    """Leading eigenpairs of the diffusion operator.

    Column 0 of ``eigenvectors`` is the trivial constant direction.
    ``residuals`` is aligned with the non-trivial columns ``1..n_eigen-1``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray | None
    sample_count: int
    degrees: np.ndarray
    sym_eigenvectors: np.ndarray
    t_steps: int = 1
    transition: np.ndarray | None = None

    def coordinates(self, columns=None) -> np.ndarray:
        cols = np.arange(1, self.eigenvalues.size) if columns is None else np.asarray(columns)
        return self.eigenvectors[:, cols] * self.eigenvalues[cols] ** self.t_steps


@dataclass
class FeatureSubsetScore:
    subset: tuple[str, ...]
    per_eigenvector_losses: np.ndarray
    total_loss: float


@dataclass
class SelectionResult:
    subset_u: tuple[str, ...]
    subset_v: tuple[str, ...]
    totals: dict[str, dict[tuple[str, ...], float]]
    table: list[dict] = field(default_factory=list)


def standardize(points: np.ndarray, mean=None, std=None):
    mean = points.mean(axis=0) if mean is None else mean
    std = points.std(axis=0) if std is None else std
    std = np.where(std > 0, std, 1.0)
    return (points - mean) / std, mean, std


def build_diffusion_matrices(points: np.ndarray, cfg: KernelConfig):
    """Gaussian kernel ``W``, Markov matrix ``P = D^-1 W`` and its symmetric conjugate."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] < 2:
        raise ValueError("need at least two points")
    d2 = cdist(points, points, "sqeuclidean")
    w = np.exp(-d2 / cfg.sigma)
    deg = w.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("kernel matrix has an empty row")
    p = w / deg[:, None]
    s = 1.0 / np.sqrt(deg)
    p_sym = s[:, None] * w * s[None, :]
    p_sym = 0.5 * (p_sym + p_sym.T)
    return w, p, p_sym


def _sign_fix(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            out[:, k] = -col
    return out


def embed(points: np.ndarray, cfg: KernelConfig, keep_transition: bool = False) -> EmbeddingResult:
    """Diffusion Maps embedding with unit-norm, sign-fixed right eigenvectors of ``P``."""
    w, p, p_sym = build_diffusion_matrices(points, cfg)
    n = p.shape[0]
    k = min(cfg.n_eigen, n)
    deg = w.sum(axis=1)
    try:
        lam, u = sl.eigh(p_sym, subset_by_index=[n - k, n - 1])
    except (sl.LinAlgError, ValueError) as exc:
        raise sl.LinAlgError(
            f"eigensolver failed on {n}x{n} kernel: degree range "
            f"[{deg.min():.3e}, {deg.max():.3e}], ratio {deg.max() / deg.min():.3e}") from exc
    lam, u = lam[::-1], u[:, ::-1]
    psi = u / np.sqrt(deg)[:, None]
    psi = psi / np.linalg.norm(psi, axis=0)
    psi = _sign_fix(psi)
    return EmbeddingResult(lam, psi, None, n, deg, u, cfg.t_steps, p if keep_transition else None)


def diffusion_distance(result: EmbeddingResult, i: int, j: int) -> float:
    """Diffusion distance from the transition probabilities of ``P^t``."""
    n = result.sample_count
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"indices ({i}, {j}) out of range for {n} samples")
    if result.transition is None:
        raise ValueError("embedding was computed without keep_transition=True")
    rows = np.zeros((2, n))
    rows[0, i] = rows[1, j] = 1.0
    for _ in range(result.t_steps):
        rows = rows @ result.transition
    stationary = result.degrees / result.degrees.sum()
    return float(np.sqrt(np.sum((rows[0] - rows[1]) ** 2 / stationary)))


def spectral_diffusion_distance(result: EmbeddingResult, i: int, j: int) -> float:
    """The same distance from the (possibly truncated) spectral expansion."""
    scale = np.sqrt(result.degrees.sum())
    psi = result.sym_eigenvectors / np.sqrt(result.degrees)[:, None]
    coords = psi * result.eigenvalues ** result.t_steps
    return float(scale * np.linalg.norm(coords[i, 1:] - coords[j, 1:]))


def local_linear_residuals(vectors: np.ndarray, kernel_scale: float | None = None,
                           flags: list | None = None, scale_divisor: float = LOCAL_SCALE_DIVISOR) -> np.ndarray:
    """Normalised LOOCV error of predicting each column from the previous ones.

    ``vectors`` holds the non-trivial eigenvectors as columns.  The first
    column is new by definition and scores 1.  For column ``k`` every sample
    ``i`` is predicted by an affine fit in the coordinates of columns
    ``0..k-1``, weighted by ``exp(-d^2 / scale^2)`` and leaving ``i`` itself
    out.  Without an explicit ``kernel_scale`` the scale is the median
    pairwise distance in those coordinates over ``scale_divisor``.
    """
    vectors = np.asarray(vectors, dtype=float)
    n, kmax = vectors.shape
    res = np.ones(kmax)
    for k in range(1, kmax):
        pred = vectors[:, :k]
        y = vectors[:, k]
        d2 = cdist(pred, pred, "sqeuclidean")
        if kernel_scale is not None:
            scale = kernel_scale
        else:
            scale = np.median(np.sqrt(d2[np.triu_indices(n, 1)])) / scale_divisor
        wts = np.exp(-d2 / scale**2)
        np.fill_diagonal(wts, 0.0)
        design = np.column_stack([np.ones(n), pred])
        q = k + 1
        outer = (design[:, :, None] * design[:, None, :]).reshape(n, q * q)
        gram = (wts @ outer).reshape(n, q, q)
        rhs = wts @ (design * y[:, None])
        # the local solution is unchanged by scaling each system; normalising by the
        # weight trace keeps far-away points out of the denormal range
        trace = np.trace(gram, axis1=1, axis2=2)
        trace = np.where(trace > 0, trace, 1.0)
        gram /= trace[:, None, None]
        rhs /= trace[:, None]
        cond = np.linalg.cond(gram)
        bad = ~np.isfinite(cond) | (cond > 1e12)
        if bad.any():
            gram[bad] += LOCAL_RIDGE * np.eye(q)
            if flags is not None:
                flags.append((k, int(bad.sum())))
            log.debug("column %d: %d ill-conditioned local fits stabilised", k, bad.sum())
        beta = np.linalg.solve(gram, rhs[..., None])[..., 0]
        fit = np.sum(design * beta, axis=1)
        res[k] = np.sqrt(np.sum((y - fit) ** 2) / np.sum(y**2))
    return res


def parsimony_residuals(result: EmbeddingResult, kernel_scale: float | None = None) -> np.ndarray:
    if result.eigenvectors.shape[1] < 2:
        raise ValueError("need at least one non-trivial eigenvector")
    r = local_linear_residuals(result.eigenvectors[:, 1:], kernel_scale)
    result.residuals = r
    return r


def parsimonious_columns(residuals: np.ndarray, cutoff: float = 0.5,
                         n_select: int | None = None) -> np.ndarray:
    """Eigenvector columns (1-based, as in :class:`EmbeddingResult`) kept as new directions."""
    residuals = np.asarray(residuals)
    if n_select is not None:
        # highest residuals win; ties keep the lower eigen index
        order = np.argsort(-residuals, kind="stable")[:n_select]
        return np.sort(order) + 1
    return np.flatnonzero(residuals > cutoff) + 1


# --------------------------------------------------------------------------
# subset scoring

def median_length_scale(points: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    if points.shape[0] > max_points:
        idx = np.random.default_rng(seed).choice(points.shape[0], max_points, replace=False)
        points = points[idx]
    d = pdist(points)
    med = np.median(d) if d.size else 1.0
    return float(med) if med > 0 else 1.0


def kernel_ridge_fit_predict(features: np.ndarray, targets: np.ndarray, ridge: float = 1e-8,
                             length_scale: float | None = None) -> np.ndarray:
    """In-sample prediction of an RBF kernel ridge regressor."""
    ell = median_length_scale(features) if length_scale is None else length_scale
    kmat = np.exp(-cdist(features, features, "sqeuclidean") / (2.0 * ell**2))
    kmat[np.diag_indices_from(kmat)] += ridge
    coef = sl.cho_solve(sl.cho_factor(kmat, lower=True, check_finite=False), targets,
                        check_finite=False)
    kmat[np.diag_indices_from(kmat)] -= ridge
    return kmat @ coef


def score_feature_subset(table: FeatureTable, subset, targets: np.ndarray,
                         ridge: float = 1e-8, length_scale: float | None = None) -> FeatureSubsetScore:
    """Regression loss of the embedding ``targets`` (N x mu) given features ``subset``."""
    subset = tuple(subset)
    if not subset:
        raise ValueError("empty feature subset")
    unknown = [f for f in subset if f not in CANDIDATE_FEATURES]
    if unknown:
        raise ValueError(f"unknown feature(s) {unknown}; candidates are {CANDIDATE_FEATURES}")
    z, _, _ = standardize(table.matrix(subset))
    targets = np.asarray(targets, dtype=float).reshape(len(z), -1)
    fit = kernel_ridge_fit_predict(z, targets, ridge, length_scale)
    losses = np.mean((targets - fit) ** 2, axis=0)
    return FeatureSubsetScore(subset, losses, float(np.sqrt(np.sum(losses**2))))


def enumerate_subsets(features=CANDIDATE_FEATURES, max_size: int = 4) -> list[tuple[str, ...]]:
    return [c for r in range(1, max_size + 1) for c in itertools.combinations(features, r)]


def embedding_inputs(time_target: str) -> tuple[str, ...]:
    """Combined input-output coordinates for the embedding of one equation."""
    return ("u", "v", time_target, "u_x", "v_x", "u_xx", "v_xx")


@dataclass(frozen=True)
class SelectionConfig:
    """Knobs of :func:`select_features`.

    Embedding inputs enter the kernel in their physical units unless
    ``standardize_inputs`` is set; the subset regressor always sees
    standardised features.  ``subset_size`` fixes the size of the returned
    subsets, ``None`` hands the choice to the ``min_gain`` rule.
    """

    kernel: KernelConfig = KernelConfig()
    samples_per_slice: int = 3000
    n_parsimonious: int | None = 3
    residual_cutoff: float = 0.5
    max_subset_size: int = 4
    ridge: float = 1e-8
    min_gain: float = 10.0
    subset_size: int | None = 3
    standardize_inputs: bool = False
    seed: int = 0


def slice_embedding(table: FeatureTable, time_target: str, cfg: SelectionConfig,
                    rng: np.random.Generator) -> tuple[FeatureTable, EmbeddingResult, np.ndarray]:
    """Subsample one epsilon slice, embed it and pick its parsimonious directions."""
    n = len(table)
    if n > cfg.samples_per_slice:
        idx = np.sort(rng.choice(n, cfg.samples_per_slice, replace=False))
        table = table.take(idx)
    z = table.matrix(embedding_inputs(time_target))
    if cfg.standardize_inputs:
        z, _, _ = standardize(z)
    result = embed(z, cfg.kernel)
    residuals = parsimony_residuals(result)
    cols = parsimonious_columns(residuals, cfg.residual_cutoff, cfg.n_parsimonious)
    return table, result, cols


def _canonical_key(subset):
    order = {f: i for i, f in enumerate(CANDIDATE_FEATURES)}
    return (len(subset), [order[f] for f in subset])


def select_subset(totals: dict[tuple[str, ...], float], min_gain: float = 10.0,
                  size: int | None = None) -> tuple[str, ...]:
    """Pick a subset from summed losses.

    With ``size`` the best subset of that size wins.  Otherwise, starting
    from the best single feature, the best subset of the next size is taken
    only while it lowers the loss by at least ``min_gain`` times;
    ``min_gain=1`` reduces to the plain argmin over all sizes.  Within one
    size, near-ties (relative 1e-12) go to the canonically first subset.
    """
    if min_gain < 1:
        raise ValueError("min_gain must be at least 1")
    by_size: dict[int, list] = {}
    for s, v in totals.items():
        by_size.setdefault(len(s), []).append((s, v))
    best = {}
    for k, items in by_size.items():
        low = min(v for _, v in items)
        tied = [s for s, v in items if v <= low * (1 + 1e-12)]
        best[k] = (min(tied, key=_canonical_key), low)
    sizes = sorted(best)
    if size is not None:
        if size not in best:
            raise ValueError(f"no scored subsets of size {size}")
        return best[size][0]
    if min_gain == 1:
        low = min(v for _, v in best.values())
        return min((best[k][0] for k in sizes if best[k][1] <= low * (1 + 1e-12)), key=_canonical_key)
    chosen = sizes[0]
    for k in sizes[1:]:
        if best[k][1] * min_gain <= best[chosen][1]:
            chosen = k
        else:
            break
    return best[chosen][0]


def select_features(slices: dict[float, FeatureTable], cfg: SelectionConfig = SelectionConfig(),
                    subsets: list | None = None) -> SelectionResult:
    """Sum total losses over epsilon slices and keep the best subset per equation.

    ``totals`` covers every enumerated subset; the returned subsets follow
    :func:`select_subset` with ``cfg.subset_size`` and ``cfg.min_gain``.
    """
    subsets = subsets or enumerate_subsets(max_size=cfg.max_subset_size)
    totals = {"u": {s: 0.0 for s in subsets}, "v": {s: 0.0 for s in subsets}}
    table_rows = []
    for slice_id, (eps, tbl) in enumerate(sorted(slices.items())):
        for eq, target in (("u", "u_t"), ("v", "v_t")):
            rng = np.random.default_rng([cfg.seed, slice_id, 0 if eq == "u" else 1])
            sub, result, cols = slice_embedding(tbl, target, cfg, rng)
            phis = result.eigenvectors[:, cols]
            for s in subsets:
                score = score_feature_subset(sub, s, phis, cfg.ridge)
                totals[eq][s] += score.total_loss
                table_rows.append({"equation": eq, "slice": slice_id, "epsilon": eps,
                                   "subset": s, "losses": score.per_eigenvector_losses,
                                   "total_loss": score.total_loss})
            log.info("eps=%.4f %s: parsimonious columns %s", eps, eq, cols.tolist())
    pick = {eq: select_subset(totals[eq], cfg.min_gain, cfg.subset_size) for eq in totals}
    return SelectionResult(pick["u"], pick["v"], totals, table_rows)


def best_by_size(totals: dict[tuple[str, ...], float]) -> dict[int, tuple[tuple[str, ...], float]]:
    out = {}
    for s, v in totals.items():
        if len(s) not in out or v < out[len(s)][1]:
            out[len(s)] = (s, v)
    return dict(sorted(out.items()))
