"""Run configuration: nested dataclasses serialised as versioned JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from ..core_model import EPS_INTERVAL, make_epsilon_grid

SCHEMA_VERSION = 1


@dataclass
class GridSection:
    x0: float = 0.0
    x_end: float = 20.0
    lbm_points: int = 40
    fd_points: int = 200


@dataclass
class EpsilonSection:
    n_eps: int = 40
    lo: float = EPS_INTERVAL[0]
    hi: float = EPS_INTERVAL[1]
    values: list[float] | None = None

    def grid(self) -> np.ndarray:
        if self.values is not None:
            return np.asarray(self.values, dtype=float)
        return make_epsilon_grid(self.n_eps, self.lo, self.hi)


@dataclass
class DataSection:
    n_ic: int = 10
    dt: float = 0.01
    record_every: float = 1.0
    t_end: float = 450.0
    trim: float = 2.0
    test_fraction: float = 0.2


@dataclass
class SelectionSection:
    sigma: float = 10.0
    n_eigen: int = 10
    samples_per_slice: int = 3000
    n_parsimonious: int | None = 3
    residual_cutoff: float = 0.5
    max_subset_size: int = 4
    ridge: float = 1e-8
    subset_size: int | None = 3
    min_gain: float = 10.0
    standardize_inputs: bool = False
    override_u: list[str] | None = None
    override_v: list[str] | None = None


@dataclass
class ModelSection:
    rpnn_hidden: int = 1000
    svd_tolerance: float = 1e-8
    fnn_width: int = 12
    fnn_lambda: float = 0.01
    fnn_max_epochs: int = 300
    max_train_records: int | None = None


@dataclass
class ContinuationSection:
    start_eps: float = 0.4
    ds: float = 0.01
    ds_max: float = 0.05
    tol: float = 1e-8
    max_steps: int = 2000
    eps_bounds: tuple[float, float] = (0.005, 1.05)
    delta: float = 1e-6
    n_eigen: int = 8


@dataclass
class RunConfig:
    run_id: str = "run"
    seed: int = 0
    grid: GridSection = field(default_factory=GridSection)
    epsilon: EpsilonSection = field(default_factory=EpsilonSection)
    data: DataSection = field(default_factory=DataSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    model: ModelSection = field(default_factory=ModelSection)
    continuation: ContinuationSection = field(default_factory=ContinuationSection)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version!r} (expected {SCHEMA_VERSION})")
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in sections:
                raise ValueError(f"unknown config key {key!r}")
            sub = _SECTIONS.get(key)
            if sub is None:
                kwargs[key] = value
                continue
            known = {f.name for f in dataclasses.fields(sub)}
            extra = set(value) - known
            if extra:
                raise ValueError(f"unknown keys in [{key}]: {sorted(extra)}")
            if key == "continuation" and "eps_bounds" in value:
                value = {**value, "eps_bounds": tuple(value["eps_bounds"])}
            kwargs[key] = sub(**value)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())


_SECTIONS = {
    "grid": GridSection,
    "epsilon": EpsilonSection,
    "data": DataSection,
    "selection": SelectionSection,
    "model": ModelSection,
    "continuation": ContinuationSection,
}


def preset(name: str) -> RunConfig:
    """``full``: complete protocol; ``reduced``: desk-scale protocol; ``smoke``: seconds."""
    if name == "full":
        return RunConfig(run_id="full")
    if name == "reduced":
        return RunConfig(run_id="reduced", epsilon=EpsilonSection(n_eps=8),
                         data=DataSection(n_ic=3))
    if name == "smoke":
        return RunConfig(
            run_id="smoke",
            epsilon=EpsilonSection(values=[0.4]),
            data=DataSection(n_ic=1, t_end=10.0, test_fraction=0.5),
            selection=SelectionSection(samples_per_slice=200, n_eigen=5, max_subset_size=2, subset_size=2),
            model=ModelSection(rpnn_hidden=50, fnn_width=4, fnn_max_epochs=5),
            continuation=ContinuationSection(max_steps=3),
        )
    raise ValueError(f"unknown preset {name!r}; choose full, reduced or smoke")


PRESETS = ("full", "reduced", "smoke")
