"""Supervised-learning records from recorded trajectories.

Records are kept columnar (one numpy array per quantity) because a full
protocol dataset has millions of rows; :class:`FeatureRecord` exists for
row-wise access when it is convenient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core_model import SpatialGrid, first_derivative, second_derivative
from .io_utils import atomic_savetxt
from .lbm import Trajectory

COLUMNS = ("epsilon", "x_index", "t_index", "u", "v", "u_x", "v_x", "u_xx", "v_xx", "u_t", "v_t")
CANDIDATE_FEATURES = ("u", "v", "u_x", "v_x", "u_xx", "v_xx")
TARGETS = ("u_t", "v_t")
INT_COLUMNS = ("x_index", "t_index")

DEFAULT_TRIM = 2.0


class FeatureRecord(NamedTuple):
    epsilon: float
    x_index: int
    t_index: int
    u: float
    v: float
    u_x: float
    v_x: float
    u_xx: float
    v_xx: float
    u_t: float
    v_t: float


class FeatureTable:
    """Column store with the fixed :data:`COLUMNS` schema."""

    def __init__(self, columns: dict[str, np.ndarray]):
        missing = set(COLUMNS) - set(columns)
        if missing:
            raise ValueError(f"missing columns: {sorted(missing)}")
        n = {len(columns[c]) for c in COLUMNS}
        if len(n) != 1:
            raise ValueError("columns have different lengths")
        self.columns = {c: np.asarray(columns[c], dtype=int if c in INT_COLUMNS else float)
                        for c in COLUMNS}

    def __len__(self):
        return self.columns["u"].size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def record(self, i: int) -> FeatureRecord:
        return FeatureRecord(*(self.columns[c][i].item() for c in COLUMNS))

    def matrix(self, names) -> np.ndarray:
        return np.column_stack([self.columns[n] for n in names])

    def take(self, index) -> "FeatureTable":
        return FeatureTable({c: a[index] for c, a in self.columns.items()})

    @classmethod
    def concatenate(cls, tables: list["FeatureTable"]) -> "FeatureTable":
        return cls({c: np.concatenate([t.columns[c] for t in tables]) for c in COLUMNS})


def time_derivative(f: np.ndarray, dt: float) -> np.ndarray:
    """Second-order derivative along axis 0: central inside, one-sided at the ends."""
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * dt)
    # written as differences so that constant data gives exactly zero
    out[0] = (4.0 * (f[1] - f[0]) - (f[2] - f[0])) / (2.0 * dt)
    out[-1] = ((f[-3] - f[-1]) - 4.0 * (f[-2] - f[-1])) / (2.0 * dt)
    return out


def compute_derivatives(traj: Trajectory, grid: SpatialGrid, trim: float = DEFAULT_TRIM) -> FeatureTable:
    """Derivative features for every retained (x, t) sample of ``traj``.

    Frames with ``t <= trim`` are discarded after the time derivatives have
    been taken, so the first retained frame still gets a central difference.
    """
    if len(traj) < 3:
        raise ValueError(f"trajectory has {len(traj)} frames, need at least 3")
    if traj.u.shape[1] != grid.m:
        raise ValueError("trajectory and grid sizes differ")
    dt = traj.times[1] - traj.times[0]
    keep = np.flatnonzero(traj.times > trim + 1e-9 * max(1.0, abs(trim)))
    u, v = traj.u, traj.v
    cols = {
        "u": u,
        "v": v,
        "u_x": first_derivative(u, grid),
        "v_x": first_derivative(v, grid),
        "u_xx": second_derivative(u, grid),
        "v_xx": second_derivative(v, grid),
        "u_t": time_derivative(u, dt),
        "v_t": time_derivative(v, dt),
    }
    cols = {k: a[keep].ravel() for k, a in cols.items()}
    n_keep, m = keep.size, grid.m
    cols["epsilon"] = np.full(n_keep * m, traj.epsilon)
    cols["t_index"] = np.repeat(keep, m)
    cols["x_index"] = np.tile(np.arange(m), n_keep)
    return FeatureTable(cols)


@dataclass
class Dataset:
    records: FeatureTable
    traj_id: np.ndarray
    is_test: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def split_labels(self) -> np.ndarray:
        return np.where(self.is_test, "test", "train")

    @property
    def train(self) -> FeatureTable:
        return self.records.take(~self.is_test)

    @property
    def test(self) -> FeatureTable:
        return self.records.take(self.is_test)

    def epsilon_slices(self, split: str | None = "train") -> dict[float, FeatureTable]:
        mask = np.ones(len(self.records), dtype=bool)
        if split == "train":
            mask = ~self.is_test
        elif split == "test":
            mask = self.is_test
        eps = self.records["epsilon"]
        return {float(e): self.records.take(mask & (eps == e)) for e in np.unique(eps[mask])}


def split_trajectories(epsilons: np.ndarray, test_fraction: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Pick test trajectories, spread over epsilon values.

    Each epsilon group keeps at least one training trajectory whenever it has
    two or more.  Returns a boolean mask over trajectories.
    """
    n = len(epsilons)
    is_test = np.zeros(n, dtype=bool)
    if n == 1:
        is_test[0] = rng.random() < test_fraction
        return is_test
    n_test = int(np.clip(round(test_fraction * n), 1, n - 1))
    groups = [rng.permutation(np.flatnonzero(epsilons == e)) for e in np.unique(epsilons)]
    order = rng.permutation(len(groups))
    candidates = []
    depth = max(len(g) for g in groups)
    for level in range(depth - 1):
        candidates.extend(groups[gi][level] for gi in order if level < len(groups[gi]) - 1)
    # singleton groups only give up their trajectory as a last resort
    candidates.extend(groups[gi][0] for gi in order if len(groups[gi]) == 1)
    candidates.extend(groups[gi][-1] for gi in order if len(groups[gi]) > 1)
    for idx in candidates[:n_test]:
        is_test[idx] = True
    return is_test


def assemble_dataset(trajs: list[Trajectory], grid: SpatialGrid, test_fraction: float = 0.2,
                     seed: int = 0, trim: float = DEFAULT_TRIM) -> Dataset:
    if not trajs:
        raise ValueError("no trajectories to assemble")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    tables = [compute_derivatives(t, grid, trim) for t in trajs]
    rng = np.random.default_rng(seed)
    traj_test = split_trajectories(np.array([t.epsilon for t in trajs]), test_fraction, rng)
    sizes = [len(t) for t in tables]
    traj_id = np.repeat(np.arange(len(trajs)), sizes)
    prov = {
        "epsilons": [float(t.epsilon) for t in trajs],
        "ics": [list(t.ic.as_tuple()) if t.ic is not None else None for t in trajs],
        "trim": trim,
        "grid_points": grid.m,
        "grid": [grid.x0, grid.x_end, grid.m, grid.wall],
        "split_seed": seed,
        "test_fraction": test_fraction,
    }
    return Dataset(FeatureTable.concatenate(tables), traj_id, traj_test[traj_id], prov)


# --------------------------------------------------------------------------
# persistence

def write_features(table: FeatureTable, path) -> None:
    fmt = ["%d" if c in INT_COLUMNS else "%.17g" for c in COLUMNS]
    data = np.column_stack([table.columns[c] for c in COLUMNS])
    atomic_savetxt(path, data, fmt, ",".join(COLUMNS))


def read_features(path) -> FeatureTable:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if tuple(header) != COLUMNS:
        raise ValueError(f"{path}: unexpected header {header}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return FeatureTable({c: data[:, i] for i, c in enumerate(COLUMNS)})


def write_dataset(ds: Dataset, features_path, split_path) -> None:
    """Features go to one file; the per-trajectory split to a companion file."""
    write_features(ds.records, features_path)
    ids, counts = np.unique(ds.traj_id, return_counts=True)
    first = np.searchsorted(ds.traj_id, ids)
    rows = np.column_stack([ids, ds.records["epsilon"][first], ds.is_test[first].astype(int), counts])
    atomic_savetxt(split_path, rows, ["%d", "%.17g", "%d", "%d"], "traj_id,epsilon,is_test,n_records")


def read_dataset(features_path, split_path, provenance: dict | None = None) -> Dataset:
    table = read_features(features_path)
    rows = np.loadtxt(split_path, delimiter=",", skiprows=1, ndmin=2)
    ids = rows[:, 0].astype(int)
    counts = rows[:, 3].astype(int)
    if counts.sum() != len(table):
        raise ValueError("split file does not match the feature file")
    traj_id = np.repeat(ids, counts)
    is_test = np.repeat(rows[:, 2].astype(bool), counts)
    return Dataset(table, traj_id, is_test, provenance or {})
