"""Learned right-hand sides: random projection networks and small tanh networks.

Both families map a row of features (a subset of the spatial derivative
fields plus ``epsilon``) to one time derivative.  Inputs are standardised
with statistics stored inside the model, so a model is self-contained.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sl
import scipy.sparse as sp
from scipy.special import expit

from .core_model import FhnParams, FieldState, SpatialGrid, first_derivative, second_derivative
from .features import CANDIDATE_FEATURES
from .io_utils import write_npz

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
INPUT_NAMES = CANDIDATE_FEATURES + ("epsilon",)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=float)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std


def _check_schema(names) -> tuple[str, ...]:
    names = tuple(names)
    bad = [n for n in names if n not in INPUT_NAMES]
    if bad or len(set(names)) != len(names):
        raise ValueError(f"invalid feature schema {names}")
    return names


# --------------------------------------------------------------------------
# random projection network

@dataclass(frozen=True)
class RpnnBasis:
    hidden_weights: np.ndarray
    hidden_biases: np.ndarray
    centers: np.ndarray

    @property
    def size(self) -> int:
        return self.hidden_biases.size

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        return expit(z @ self.hidden_weights.T + self.hidden_biases)


def sample_rpnn_basis(train_inputs: np.ndarray, n_hidden: int, seed) -> RpnnBasis:
    """Logistic ridge functions centred on training points.

    Each unit ``j`` gets a centre ``c_j`` and an independent point ``d_j``,
    both drawn from the rows of ``train_inputs``; the direction is
    ``w_j = d_j - c_j`` and the bias ``b_j = -w_j . c_j`` puts the inflection
    point of the unit on its centre.
    """
    z = np.asarray(train_inputs, dtype=float)
    n = z.shape[0]
    if n_hidden > n:
        raise ValueError(f"{n_hidden} hidden units need at least as many training rows, got {n}")
    rng = np.random.default_rng(seed)
    centers = z[rng.choice(n, n_hidden, replace=False)]
    others = z[rng.choice(n, n_hidden, replace=False)]
    for _ in range(100):
        bad = np.linalg.norm(others - centers, axis=1) < 1e-12
        if not bad.any():
            break
        others[bad] = z[rng.integers(0, n, bad.sum())]
    else:
        raise ValueError("could not draw distinct centre pairs; training inputs are degenerate")
    w = others - centers
    b = -np.einsum("ij,ij->i", w, centers)
    return RpnnBasis(w, b, centers)


@dataclass(frozen=True)
class RpnnModel:
    hidden_weights: np.ndarray
    hidden_biases: np.ndarray
    output_weights: np.ndarray
    svd_tolerance: float
    feature_names: tuple[str, ...]
    centers: np.ndarray
    scaler: Standardizer
    rank: int

    kind = "rpnn"

    @property
    def basis(self) -> RpnnBasis:
        return RpnnBasis(self.hidden_weights, self.hidden_biases, self.centers)

    def predict_scaled(self, z: np.ndarray, chunk: int = 50000) -> np.ndarray:
        out = np.empty(z.shape[0])
        for s in range(0, z.shape[0], chunk):
            out[s:s + chunk] = self.basis.evaluate(z[s:s + chunk]) @ self.output_weights
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_scaled(self.scaler.apply(x))


def _tsqr(blocks):
    """Upper-triangular factor of the row-stacked ``blocks`` (streamed QR)."""
    r = None
    for blk in blocks:
        stacked = blk if r is None else np.vstack([r, blk])
        r = sl.qr(stacked, mode="r", overwrite_a=True, check_finite=False)[0]
        r = r[: min(r.shape)]
    return r


def fit_rpnn(basis: RpnnBasis, train_inputs: np.ndarray, train_targets: np.ndarray,
             svd_tolerance: float = 1e-8, chunk: int = 20000,
             feature_names=(), scaler: Standardizer | None = None) -> RpnnModel:
    """Least-squares output weights through a truncated SVD of the collocation matrix.

    ``train_inputs`` must already be in the coordinates the basis was drawn
    in.  The collocation matrix is never formed whole: it is reduced chunk
    by chunk to its triangular factor together with the projected targets,
    and the SVD is taken of that factor, which has the same singular values.
    """
    z = np.asarray(train_inputs, dtype=float)
    y = np.asarray(train_targets, dtype=float).ravel()
    if y.size != z.shape[0]:
        raise ValueError("targets and inputs have different lengths")
    h = basis.size
    blocks = (np.column_stack([basis.evaluate(z[s:s + chunk]), y[s:s + chunk]])
              for s in range(0, z.shape[0], chunk))
    r = _tsqr(blocks)
    if r.shape[0] < h + 1:
        r = np.vstack([r, np.zeros((h + 1 - r.shape[0], h + 1))])
    r_a, qy = r[:h, :h], r[:h, h]
    u, s, vt = sl.svd(r_a, check_finite=False)
    if s[0] <= 0:
        raise ValueError("collocation matrix is identically zero")
    keep = s > svd_tolerance * s[0]
    if not keep.any():
        raise ValueError("all singular values fall below the truncation cutoff")
    weights = vt[keep].T @ ((u[:, keep].T @ qy) / s[keep])
    scaler = scaler or Standardizer(np.zeros(z.shape[1]), np.ones(z.shape[1]))
    return RpnnModel(basis.hidden_weights, basis.hidden_biases, weights, svd_tolerance,
                     tuple(feature_names), basis.centers, scaler, int(keep.sum()))


def train_rpnn(inputs: np.ndarray, targets: np.ndarray, feature_names, n_hidden: int = 1000,
               seed=0, svd_tolerance: float = 1e-8) -> RpnnModel:
    names = _check_schema(feature_names)
    scaler = Standardizer.fit(inputs)
    z = scaler.apply(inputs)
    basis = sample_rpnn_basis(z, n_hidden, seed)
    return fit_rpnn(basis, z, targets, svd_tolerance, feature_names=names, scaler=scaler)


# --------------------------------------------------------------------------
# two-hidden-layer network trained by Levenberg-Marquardt

class FnnTrainingError(RuntimeError):
    def __init__(self, message: str, model: "FnnModel | None"):
        super().__init__(message)
        self.model = model


@dataclass(frozen=True)
class FnnModel:
    layer1_weights: np.ndarray
    layer1_biases: np.ndarray
    layer2_weights: np.ndarray
    layer2_biases: np.ndarray
    output_weights: np.ndarray
    output_bias: float
    lam: float
    feature_names: tuple[str, ...]
    scaler: Standardizer
    target_mean: float = 0.0
    target_std: float = 1.0

    kind = "fnn"

    @property
    def width(self) -> int:
        return self.layer1_biases.size

    def predict_scaled(self, z: np.ndarray) -> np.ndarray:
        a1 = np.tanh(z @ self.layer1_weights.T + self.layer1_biases)
        a2 = np.tanh(a1 @ self.layer2_weights.T + self.layer2_biases)
        return a2 @ self.output_weights + self.output_bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.target_mean + self.target_std * self.predict_scaled(self.scaler.apply(x))


class _FnnLayout:
    """Packing of all network parameters into one vector."""

    def __init__(self, n_in: int, width: int):
        self.n_in, self.h = n_in, width
        sizes = [width * n_in, width, width * width, width, width, 1]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.size = int(self.offsets[-1])
        # biases carry no penalty
        self.penalized = np.zeros(self.size, dtype=bool)
        for k in (0, 2, 4):
            self.penalized[self.offsets[k]:self.offsets[k + 1]] = True

    def unpack(self, theta):
        o, h, n = self.offsets, self.h, self.n_in
        return (theta[o[0]:o[1]].reshape(h, n), theta[o[1]:o[2]], theta[o[2]:o[3]].reshape(h, h),
                theta[o[3]:o[4]], theta[o[4]:o[5]], theta[o[5]])

    def forward(self, theta, z):
        w1, b1, w2, b2, wo, bo = self.unpack(theta)
        a1 = np.tanh(z @ w1.T + b1)
        a2 = np.tanh(a1 @ w2.T + b2)
        return a1, a2, a2 @ wo + bo

    def jacobian(self, theta, z):
        """Rows: d(output_k)/d(theta) for every sample ``k``."""
        _, _, w2, _, wo, _ = self.unpack(theta)
        a1, a2, out = self.forward(theta, z)
        n = z.shape[0]
        g2 = (1.0 - a2**2) * wo                     # d out / d pre2
        g1 = (1.0 - a1**2) * (g2 @ w2)              # d out / d pre1
        jac = np.empty((n, self.size))
        o = self.offsets
        jac[:, o[0]:o[1]] = (g1[:, :, None] * z[:, None, :]).reshape(n, -1)
        jac[:, o[1]:o[2]] = g1
        jac[:, o[2]:o[3]] = (g2[:, :, None] * a1[:, None, :]).reshape(n, -1)
        jac[:, o[3]:o[4]] = g2
        jac[:, o[4]:o[5]] = a2
        jac[:, o[5]] = 1.0
        return jac, out


@dataclass(frozen=True)
class LmConfig:
    max_epochs: int = 300
    mu_init: float = 1e-3
    mu_dec: float = 0.1
    mu_inc: float = 10.0
    mu_max: float = 1e10
    validation_fraction: float = 0.1
    max_fail: int = 20
    min_grad: float = 1e-12
    chunk: int = 20000


def _init_params(layout: _FnnLayout, rng: np.random.Generator) -> np.ndarray:
    theta = np.zeros(layout.size)
    o, h, n = layout.offsets, layout.h, layout.n_in
    theta[o[0]:o[1]] = rng.uniform(-1, 1, h * n) * np.sqrt(6.0 / (h + n))
    theta[o[1]:o[2]] = rng.uniform(-1, 1, h)
    theta[o[2]:o[3]] = rng.uniform(-1, 1, h * h) * np.sqrt(3.0 / h)
    theta[o[3]:o[4]] = rng.uniform(-1, 1, h)
    theta[o[4]:o[5]] = rng.uniform(-1, 1, h) * np.sqrt(3.0 / h)
    return theta


def train_fnn(train_inputs: np.ndarray, train_targets: np.ndarray, feature_names=None,
              width: int = 12, lam: float = 0.01, seed=0, max_epochs: int | None = None,
              cfg: LmConfig = LmConfig(), history: list | None = None) -> FnnModel:
    """Minimise ``sum(r^2) + lam * sum(weights^2)`` by Levenberg-Marquardt.

    Inputs and targets are standardised first.  A random ``validation_fraction``
    of the rows is held back; the parameters with the lowest validation error
    are returned.  ``history`` receives the objective after every accepted step.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    x = np.asarray(train_inputs, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(train_targets, dtype=float).ravel()
    if y.size != x.shape[0]:
        raise ValueError("targets and inputs have different lengths")
    names = _check_schema(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(x.shape[1]))
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    rng = np.random.default_rng(seed)

    scaler = Standardizer.fit(x)
    z = scaler.apply(x)
    t_mean, t_std = float(y.mean()), float(y.std()) or 1.0
    t = (y - t_mean) / t_std

    n = z.shape[0]
    n_val = int(cfg.validation_fraction * n) if n >= 10 else 0
    perm = rng.permutation(n)
    val, fit = perm[:n_val], perm[n_val:]
    z_fit, t_fit = z[fit], t[fit]

    layout = _FnnLayout(z.shape[1], width)
    theta = _init_params(layout, rng)
    pen = layout.penalized.astype(float)

    def objective(th):
        sse = 0.0
        for s in range(0, z_fit.shape[0], cfg.chunk):
            r = layout.forward(th, z_fit[s:s + cfg.chunk])[2] - t_fit[s:s + cfg.chunk]
            sse += r @ r
        return sse + lam * np.sum(pen * th**2)

    def val_error(th):
        if n_val == 0:
            return objective(th)
        r = layout.forward(th, z[val])[2] - t[val]
        return float(r @ r / n_val)

    def make_model(th):
        w1, b1, w2, b2, wo, bo = layout.unpack(th.copy())
        return FnnModel(w1, b1, w2, b2, wo, float(bo), lam, names, scaler, t_mean, t_std)

    e = objective(theta)
    if not np.isfinite(e):
        raise FnnTrainingError("non-finite loss at initialisation", None)
    best_theta, best_val, fails = theta.copy(), val_error(theta), 0
    mu = cfg.mu_init
    eye = np.eye(layout.size)
    for epoch in range(max_epochs):
        jtj = np.zeros((layout.size, layout.size))
        jtr = np.zeros(layout.size)
        for s in range(0, z_fit.shape[0], cfg.chunk):
            jac, out = layout.jacobian(theta, z_fit[s:s + cfg.chunk])
            jtj += jac.T @ jac
            jtr += jac.T @ (out - t_fit[s:s + cfg.chunk])
        jtj[np.diag_indices_from(jtj)] += lam * pen
        grad = jtr + lam * pen * theta
        if np.max(np.abs(grad)) < cfg.min_grad:
            break
        accepted = False
        while mu <= cfg.mu_max:
            try:
                step = sl.solve(jtj + mu * eye, -grad, assume_a="pos", check_finite=False)
            except (sl.LinAlgError, ValueError):
                mu *= cfg.mu_inc
                continue
            trial = theta + step
            e_trial = objective(trial)
            if np.isfinite(e_trial) and e_trial < e:
                theta, e, accepted = trial, e_trial, True
                mu = max(mu * cfg.mu_dec, 1e-20)
                break
            if not np.isfinite(e_trial) and not np.all(np.isfinite(step)):
                raise FnnTrainingError("non-finite parameters", make_model(theta))
            mu *= cfg.mu_inc
        if not accepted:
            break
        if history is not None:
            history.append(e)
        v = val_error(theta)
        if v < best_val:
            best_theta, best_val, fails = theta.copy(), v, 0
        else:
            fails += 1
            if fails >= cfg.max_fail:
                break
        if epoch % 25 == 0:
            log.debug("epoch %d: E=%.4e val=%.4e mu=%.1e", epoch, e, v, mu)
    if n_val == 0:
        best_theta = theta
    return make_model(best_theta)


# --------------------------------------------------------------------------
# closed-form stand-in used to validate the Jacobian machinery

@dataclass(frozen=True)
class ClosedFormModel:
    """Exact FHN right-hand side expressed on feature rows."""

    equation: str
    params: FhnParams = FhnParams()

    kind = "closed_form"

    @property
    def feature_names(self) -> tuple[str, ...]:
        if self.equation == "u":
            return ("u", "v", "u_xx", "epsilon")
        return ("u", "v", "v_xx", "epsilon")

    def predict(self, x: np.ndarray) -> np.ndarray:
        u, v, lap, eps = (x[:, i] for i in range(4))
        p = self.params
        if self.equation == "u":
            return p.d_u * lap + u - u**3 - v
        return p.d_v * lap + eps * (u - p.alpha1 * v - p.alpha0)


# --------------------------------------------------------------------------
# right-hand side on a grid

def derivative_fields(state: FieldState, grid: SpatialGrid) -> dict[str, np.ndarray]:
    return {
        "u": state.u,
        "v": state.v,
        "u_x": first_derivative(state.u, grid),
        "v_x": first_derivative(state.v, grid),
        "u_xx": second_derivative(state.u, grid),
        "v_xx": second_derivative(state.v, grid),
    }


@dataclass(frozen=True)
class SurrogateRhs:
    model_u: object
    model_v: object

    def __post_init__(self):
        for m in (self.model_u, self.model_v):
            _check_schema(m.feature_names)

    def predict_fields(self, fields: dict[str, np.ndarray], epsilon) -> tuple[np.ndarray, np.ndarray]:
        """Pointwise evaluation on precomputed derivative fields (any leading shape)."""
        shape = np.shape(fields["u"])
        full = dict(fields)
        full["epsilon"] = np.broadcast_to(np.asarray(epsilon, dtype=float), shape)
        out = []
        for m in (self.model_u, self.model_v):
            missing = [f for f in m.feature_names if f not in full]
            if missing:
                raise ValueError(f"fields lack {missing} required by the model schema")
            x = np.column_stack([np.asarray(full[f], dtype=float).ravel() for f in m.feature_names])
            out.append(m.predict(x).reshape(shape))
        return out[0], out[1]


def reference_rhs(params: FhnParams = FhnParams()) -> SurrogateRhs:
    return SurrogateRhs(ClosedFormModel("u", params), ClosedFormModel("v", params))


def predict_rhs(model: SurrogateRhs, state: FieldState, epsilon: float,
                grid: SpatialGrid) -> tuple[np.ndarray, np.ndarray]:
    if state.m != grid.m:
        raise ValueError(f"state has {state.m} points, grid has {grid.m}")
    return model.predict_fields(derivative_fields(state, grid), epsilon)


def _batched_fields(u: np.ndarray, v: np.ndarray, grid: SpatialGrid) -> dict[str, np.ndarray]:
    return {
        "u": u, "v": v,
        "u_x": first_derivative(u, grid), "v_x": first_derivative(v, grid),
        "u_xx": second_derivative(u, grid), "v_xx": second_derivative(v, grid),
    }


def numerical_jacobian(model: SurrogateRhs, state: FieldState | np.ndarray, epsilon: float,
                       grid: SpatialGrid, delta: float = 1e-6) -> tuple[sp.csc_matrix, np.ndarray]:
    """Central-difference Jacobian of :func:`predict_rhs` and its epsilon derivative.

    The stencils only couple nearest neighbours, so field entries three
    apart never influence the same output: all entries of one residue class
    mod 3 are perturbed together, and the whole banded Jacobian costs twelve
    paired evaluations (plus two for epsilon) regardless of grid size.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    x = state.stacked() if isinstance(state, FieldState) else np.asarray(state, dtype=float)
    m = grid.m
    if x.size != 2 * m:
        raise ValueError(f"state vector has length {x.size}, expected {2 * m}")
    base = x.reshape(2, m)
    n_col = 3
    # perturbed copies: (field, colour, sign)
    pert = np.repeat(base[None], 2 * n_col * 2, axis=0).reshape(2, n_col, 2, 2, m)
    for f in range(2):
        for c in range(n_col):
            pert[f, c, 0, f, c::n_col] += delta
            pert[f, c, 1, f, c::n_col] -= delta
    flat = pert.reshape(-1, 2, m)
    fu, fv = model.predict_fields(_batched_fields(flat[:, 0], flat[:, 1], grid), epsilon)
    out = np.stack([fu, fv], axis=1).reshape(2, n_col, 2, 2 * m)
    diff = (out[:, :, 0] - out[:, :, 1]) / (2.0 * delta)   # (field, colour, rows)

    rows, cols, vals = [], [], []
    idx = np.arange(m)
    for f in range(2):
        for c in range(n_col):
            for eq in range(2):
                for off in (-1, 0, 1):
                    j = idx + off
                    ok = (j >= 0) & (j < m) & (j % n_col == c)
                    rows.append(eq * m + idx[ok])
                    cols.append(f * m + j[ok])
                    vals.append(diff[f, c, eq * m + idx[ok]])
    jac = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(2 * m, 2 * m))

    fe = _batched_fields(np.stack([base[0]] * 2), np.stack([base[1]] * 2), grid)
    eps_pair = np.array([[epsilon + delta], [epsilon - delta]])
    eu, ev = model.predict_fields(fe, eps_pair)
    d_eps = np.concatenate([eu[0] - eu[1], ev[0] - ev[1]]) / (2.0 * delta)
    return jac, d_eps


class SurrogateProvider:
    """Continuation interface around a learned right-hand side."""

    def __init__(self, rhs: SurrogateRhs, grid: SpatialGrid, delta: float = 1e-6):
        self.rhs = rhs
        self.grid = grid
        self.delta = delta

    @property
    def m(self) -> int:
        return self.grid.m

    def residual(self, x: np.ndarray, eps: float) -> np.ndarray:
        fu, fv = predict_rhs(self.rhs, FieldState.from_stacked(np.asarray(x, dtype=float)), eps, self.grid)
        return np.concatenate([fu, fv])

    def jacobian_blocks(self, x: np.ndarray, eps: float):
        return numerical_jacobian(self.rhs, x, eps, self.grid, self.delta)


# --------------------------------------------------------------------------
# persistence

_RPNN_ARRAYS = ("hidden_weights", "hidden_biases", "output_weights", "centers")
_FNN_ARRAYS = ("layer1_weights", "layer1_biases", "layer2_weights", "layer2_biases", "output_weights")


def _model_payload(model, prefix: str) -> tuple[dict, dict]:
    if model.kind not in ("rpnn", "fnn"):
        raise TypeError(f"cannot serialise model of kind {model.kind!r}")
    arrays = {f"{prefix}scaler_mean": model.scaler.mean, f"{prefix}scaler_std": model.scaler.std}
    meta = {"kind": model.kind, "feature_names": list(model.feature_names)}
    if model.kind == "rpnn":
        arrays.update({prefix + k: getattr(model, k) for k in _RPNN_ARRAYS})
        meta.update(svd_tolerance=model.svd_tolerance, rank=model.rank)
    else:
        arrays.update({prefix + k: getattr(model, k) for k in _FNN_ARRAYS})
        meta.update(output_bias=model.output_bias, lam=model.lam,
                    target_mean=model.target_mean, target_std=model.target_std)
    return arrays, meta


def _model_from_payload(data, meta: dict, prefix: str):
    scaler = Standardizer(data[f"{prefix}scaler_mean"], data[f"{prefix}scaler_std"])
    names = tuple(meta["feature_names"])
    if meta["kind"] == "rpnn":
        a = {k: data[prefix + k] for k in _RPNN_ARRAYS}
        return RpnnModel(a["hidden_weights"], a["hidden_biases"], a["output_weights"],
                         meta["svd_tolerance"], names, a["centers"], scaler, meta["rank"])
    if meta["kind"] == "fnn":
        a = {k: data[prefix + k] for k in _FNN_ARRAYS}
        return FnnModel(a["layer1_weights"], a["layer1_biases"], a["layer2_weights"],
                        a["layer2_biases"], a["output_weights"], meta["output_bias"], meta["lam"],
                        names, scaler, meta["target_mean"], meta["target_std"])
    raise ValueError(f"unknown model kind {meta['kind']!r}")


def save_surrogate(rhs: SurrogateRhs, path, extra: dict | None = None) -> None:
    """Write both models to one ``.npz`` container with a JSON header."""
    arrays_u, meta_u = _model_payload(rhs.model_u, "u/")
    arrays_v, meta_v = _model_payload(rhs.model_v, "v/")
    header = {"format_version": MODEL_FORMAT_VERSION, "u": meta_u, "v": meta_v, "extra": extra or {}}
    write_npz(path, {"header": np.array(json.dumps(header, sort_keys=True)), **arrays_u, **arrays_v})


def load_surrogate(path) -> tuple[SurrogateRhs, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model format {header.get('format_version')}")
        rhs = SurrogateRhs(_model_from_payload(data, header["u"], "u/"),
                           _model_from_payload(data, header["v"], "v/"))
    return rhs, header["extra"]
