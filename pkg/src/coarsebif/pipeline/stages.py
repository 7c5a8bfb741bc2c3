"""Pipeline stages operating on a run directory.

Layout of a run directory::

    config.json  manifest.json
    cells/       one trajectory per (epsilon, initial condition) cell
    data/        features.csv, split.csv, provenance.json
    selection/   scores.csv, subsets.json
    models/      <family>-<fs|full>.npz and error tables
    bifurcation/ <provider>[-<fs|full>]/ branch, profiles, diagrams, critical points
    report/      summary.txt and figures

Randomness comes from one root seed.  Stage ``k`` and cell ``(i, j)`` use
``SeedSequence(root, spawn_key=(k, i, j))`` with ``k`` = 1 for initial
conditions, 2 for the train/test split, 3 for embedding subsamples and 4
for model initialisation.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from pathlib import Path

import numpy as np

from ..continuation import Branch, ContinuationConfig, detect_fold, detect_hopf, trace_branch, write_branch
from ..core_model import FhnParams, FieldState, InitialConditionParams, SpatialGrid, initial_profile, sample_initial_condition
from ..fd_reference import FdProvider, NewtonError
from ..features import CANDIDATE_FEATURES, assemble_dataset, read_dataset, write_dataset
from ..io_utils import atomic_savetxt, atomic_write_json, atomic_write_text, sha256_file, write_npz
from ..lbm import LbmConfig, LbmDivergence, Trajectory, run_lbm_batch
from ..manifold import KernelConfig, SelectionConfig, select_features
from ..surrogate import SurrogateProvider, SurrogateRhs, load_surrogate, save_surrogate, train_fnn, train_rpnn
from .config import RunConfig

log = logging.getLogger(__name__)

STAGE_IDS = {"ic": 1, "split": 2, "selection": 3, "model": 4}
FAMILIES = ("rpnn", "fnn")


class StageError(RuntimeError):
    pass


def seed_for(root: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in key))


def _int_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint32)[0])


# --------------------------------------------------------------------------
# run directory and manifest

def _stage_rank(name: str) -> tuple:
    order = ["generate", "select-features", "train", "bifurcation", "report"]
    head = name.split("/")[0]
    return (order.index(head) if head in order else len(order), name)


class RunDir:
    def __init__(self, path, config: RunConfig):
        self.path = Path(path)
        self.config = config

    @classmethod
    def open(cls, path, config: RunConfig | None = None) -> "RunDir":
        """Open (or create) a run directory; an existing config must match ``config``."""
        path = Path(path)
        cfg_path = path / "config.json"
        if cfg_path.exists():
            stored = RunConfig.load(cfg_path)
            if config is not None and config.to_dict() != stored.to_dict():
                raise StageError(f"{path} already holds a different configuration; use a new run directory")
            return cls(path, stored)
        if config is None:
            raise StageError(f"{path} has no config.json; pass --config or --preset")
        if path.exists() and any(path.iterdir()):
            raise StageError(f"{path} is not empty and has no config.json")
        path.mkdir(parents=True, exist_ok=True)
        atomic_write_text(cfg_path, config.to_json())
        run = cls(path, config)
        run.save_manifest({"run_id": config.run_id, "stages": {}})
        return run

    # manifest ------------------------------------------------------------
    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    def manifest(self) -> dict:
        with open(self.manifest_path) as fh:
            return json.load(fh)

    def save_manifest(self, man: dict) -> None:
        man["stages"] = dict(sorted(man["stages"].items(), key=lambda kv: _stage_rank(kv[0])))
        atomic_write_json(self.manifest_path, man)

    def stage(self, name: str) -> dict | None:
        return self.manifest()["stages"].get(name)

    def completed(self, name: str) -> bool:
        st = self.stage(name)
        return bool(st and st.get("complete"))

    def require(self, name: str) -> dict:
        st = self.stage(name)
        if not (st and st.get("complete")):
            raise StageError(f"stage {name!r} has not been completed in {self.path}")
        for rel, digest in st.get("artifacts", {}).items():
            p = self.path / rel
            if not p.exists() or sha256_file(p) != digest:
                raise StageError(f"artifact {rel} of stage {name!r} is missing or was modified")
        return st

    def begin(self, name: str, resume: bool) -> bool:
        """Return False when the stage is already complete and may be skipped."""
        st = self.stage(name)
        if st and st.get("complete"):
            if resume:
                log.info("stage %s already complete; skipping", name)
                return False
            raise StageError(f"stage {name!r} is already complete in {self.path}; "
                             "outputs are immutable, use a new run directory or --resume")
        if st and not resume:
            raise StageError(f"stage {name!r} was interrupted; rerun with --resume")
        man = self.manifest()
        man["stages"][name] = {"complete": False}
        self.save_manifest(man)
        return True

    def finish(self, name: str, artifacts: list[Path], seconds: float, **info) -> dict:
        man = self.manifest()
        entry = {"complete": True, "seconds": round(seconds, 3),
                 "artifacts": {str(p.relative_to(self.path)): sha256_file(p) for p in sorted(artifacts)}}
        entry.update(info)
        man["stages"][name] = entry
        self.save_manifest(man)
        return entry

    def abort(self, name: str) -> None:
        """Forget a stage that failed before writing anything."""
        man = self.manifest()
        man["stages"].pop(name, None)
        self.save_manifest(man)

    def sub(self, *parts) -> Path:
        p = self.path.joinpath(*parts)
        p.mkdir(parents=True, exist_ok=True)
        return p


# --------------------------------------------------------------------------
# generate

def lbm_grid(cfg: RunConfig) -> SpatialGrid:
    return SpatialGrid.lattice(cfg.grid.x0, cfg.grid.x_end, cfg.grid.lbm_points)


def _cell_path(run: RunDir, i: int, k: int) -> Path:
    return run.path / "cells" / f"cell_{i:03d}_{k:03d}.npz"


def _failed_path(run: RunDir, i: int, k: int) -> Path:
    return run.path / "cells" / f"cell_{i:03d}_{k:03d}.failed.json"


def cell_initial_condition(cfg: RunConfig, grid: SpatialGrid, i: int, k: int):
    rng = np.random.default_rng(seed_for(cfg.seed, STAGE_IDS["ic"], i, k))
    return sample_initial_condition(rng, grid)


def _load_cell(path: Path) -> Trajectory:
    with np.load(path, allow_pickle=False) as d:
        return Trajectory(d["times"], d["u"], d["v"], float(d["epsilon"]),
                          InitialConditionParams(*map(float, d["ic"])))


def cmd_generate(run: RunDir, resume: bool = False) -> dict:
    name = "generate"
    if not run.begin(name, resume):
        return run.stage(name)
    t0 = time.perf_counter()
    cfg = run.config
    grid = lbm_grid(cfg)
    lcfg = LbmConfig(dt=cfg.data.dt, record_every=cfg.data.record_every, t_end=cfg.data.t_end, grid=grid)
    eps_values = cfg.epsilon.grid()
    run.sub("cells")
    params = FhnParams()
    for i, eps in enumerate(eps_values):
        todo = [k for k in range(cfg.data.n_ic)
                if not (_cell_path(run, i, k).exists() or _failed_path(run, i, k).exists())]
        if not todo:
            continue
        draws = [cell_initial_condition(cfg, grid, i, k) for k in todo]
        results = run_lbm_batch([d[1] for d in draws], [eps] * len(todo), params, lcfg, [d[0] for d in draws])
        for k, (icp, _), res in zip(todo, draws, results):
            if isinstance(res, LbmDivergence):
                atomic_write_json(_failed_path(run, i, k), {"epsilon": float(eps), "ic": list(icp.as_tuple()),
                                                            "error": str(res), "t": res.t})
                continue
            write_npz(_cell_path(run, i, k), {"times": res.times, "u": res.u, "v": res.v,
                                              "epsilon": np.float64(eps), "ic": np.array(icp.as_tuple())})
        log.info("epsilon %d/%d (%.4f): %d cells simulated", i + 1, len(eps_values), eps, len(todo))

    trajs, cells, failed = [], [], []
    for i in range(len(eps_values)):
        for k in range(cfg.data.n_ic):
            if _cell_path(run, i, k).exists():
                trajs.append(_load_cell(_cell_path(run, i, k)))
                cells.append(_cell_path(run, i, k))
            else:
                failed.append([i, k])
    if not trajs:
        raise StageError("every simulation cell diverged; no dataset produced")
    split_seed = _int_seed(seed_for(cfg.seed, STAGE_IDS["split"]))
    ds = assemble_dataset(trajs, grid, cfg.data.test_fraction, split_seed, cfg.data.trim)
    data = run.sub("data")
    write_dataset(ds, data / "features.csv", data / "split.csv")
    atomic_write_json(data / "provenance.json", ds.provenance)
    arts = cells + [data / "features.csv", data / "split.csv", data / "provenance.json"]
    arts += sorted((run.path / "cells").glob("*.failed.json"))
    return run.finish(name, arts, time.perf_counter() - t0, n_records=len(ds.records),
                      n_trajectories=len(trajs), failed_cells=failed)


def load_dataset(run: RunDir):
    run.require("generate")
    data = run.path / "data"
    with open(data / "provenance.json") as fh:
        prov = json.load(fh)
    return read_dataset(data / "features.csv", data / "split.csv", prov)


# --------------------------------------------------------------------------
# feature selection

def _subset_text(s) -> str:
    return ";".join(s)


def cmd_select_features(run: RunDir, resume: bool = False, override_u=None, override_v=None) -> dict:
    name = "select-features"
    if not run.begin(name, resume):
        return run.stage(name)
    t0 = time.perf_counter()
    cfg = run.config
    sc = cfg.selection
    override_u = override_u or sc.override_u
    override_v = override_v or sc.override_v
    ds = load_dataset(run)
    scfg = SelectionConfig(kernel=KernelConfig(sc.sigma, sc.n_eigen), samples_per_slice=sc.samples_per_slice,
                           n_parsimonious=sc.n_parsimonious, residual_cutoff=sc.residual_cutoff,
                           max_subset_size=sc.max_subset_size, ridge=sc.ridge, min_gain=sc.min_gain,
                           subset_size=sc.subset_size, standardize_inputs=sc.standardize_inputs,
                           seed=_int_seed(seed_for(cfg.seed, STAGE_IDS["selection"])))
    result = select_features(ds.epsilon_slices("train"), scfg)
    out = run.sub("selection")
    n_loss = max((len(r["losses"]) for r in result.table), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["equation", "slice", "epsilon", "subset"] + [f"loss_{k + 1}" for k in range(n_loss)] + ["total_loss"])
    for r in result.table:
        losses = [f"{x:.17g}" for x in r["losses"]] + [""] * (n_loss - len(r["losses"]))
        w.writerow([r["equation"], r["slice"], f"{r['epsilon']:.17g}", _subset_text(r["subset"])]
                   + losses + [f"{r['total_loss']:.17g}"])
    atomic_write_text(out / "scores.csv", buf.getvalue())
    chosen = {
        "u": list(override_u) if override_u else list(result.subset_u),
        "v": list(override_v) if override_v else list(result.subset_v),
        "selected_u": list(result.subset_u),
        "selected_v": list(result.subset_v),
        "overridden": bool(override_u or override_v),
        "totals": {eq: {_subset_text(s): v for s, v in t.items()} for eq, t in result.totals.items()},
    }
    for s in (chosen["u"], chosen["v"]):
        bad = [f for f in s if f not in CANDIDATE_FEATURES]
        if bad:
            raise StageError(f"override subset contains unknown features {bad}")
    atomic_write_json(out / "subsets.json", chosen)
    return run.finish(name, [out / "scores.csv", out / "subsets.json"], time.perf_counter() - t0,
                      subset_u=chosen["u"], subset_v=chosen["v"])


def chosen_subsets(run: RunDir) -> tuple[list[str], list[str]]:
    run.require("select-features")
    with open(run.path / "selection" / "subsets.json") as fh:
        s = json.load(fh)
    return s["u"], s["v"]


# --------------------------------------------------------------------------
# training

def model_key(family: str, feature_selection: bool) -> str:
    return f"{family}-{'fs' if feature_selection else 'full'}"


def input_schemas(run: RunDir, feature_selection: bool) -> tuple[tuple[str, ...], tuple[str, ...]]:
    if feature_selection:
        su, sv = chosen_subsets(run)
        return tuple(su) + ("epsilon",), tuple(sv) + ("epsilon",)
    full = CANDIDATE_FEATURES + ("epsilon",)
    return full, full


def _errors(pred, y) -> tuple[float, float]:
    r = pred - y
    return float(np.mean(r**2)), float(np.max(np.abs(r)))


def cmd_train(run: RunDir, family: str, feature_selection: bool, resume: bool = False) -> dict:
    if family not in FAMILIES:
        raise StageError(f"cannot train provider {family!r}; choose rpnn or fnn")
    key = model_key(family, feature_selection)
    name = f"train/{key}"
    if not run.begin(name, resume):
        return run.stage(name)
    t0 = time.perf_counter()
    cfg = run.config
    mc = cfg.model
    ds = load_dataset(run)
    schemas = input_schemas(run, feature_selection)
    train, test = ds.train, ds.test
    n = len(train)
    fit_rows = np.arange(n)
    if mc.max_train_records is not None and n > mc.max_train_records:
        rng = np.random.default_rng(seed_for(cfg.seed, STAGE_IDS["model"], 0))
        fit_rows = np.sort(rng.choice(n, mc.max_train_records, replace=False))
    fit_table = train.take(fit_rows)
    models, fit_seconds, rows = {}, {}, []
    for e_id, (eq, target, schema) in enumerate((("u", "u_t", schemas[0]), ("v", "v_t", schemas[1]))):
        x, y = fit_table.matrix(schema), fit_table[target]
        seed = seed_for(cfg.seed, STAGE_IDS["model"], FAMILIES.index(family) + 1, e_id)
        ts = time.perf_counter()
        if family == "rpnn":
            model = train_rpnn(x, y, schema, mc.rpnn_hidden, seed, mc.svd_tolerance)
        else:
            model = train_fnn(x, y, schema, mc.fnn_width, mc.fnn_lambda, seed, mc.fnn_max_epochs)
        fit_seconds[eq] = time.perf_counter() - ts
        models[eq] = model
        for split, tbl in (("train", train), ("test", test)):
            if len(tbl) == 0:
                rows.append((eq, split, float("nan"), float("nan")))
                continue
            mse, linf = _errors(model.predict(tbl.matrix(schema)), tbl[target])
            rows.append((eq, split, mse, linf))
        log.info("%s %s: fit %.1fs, test mse %.3e", key, eq, fit_seconds[eq], rows[-1][2])
    out = run.sub("models")
    rhs = SurrogateRhs(models["u"], models["v"])
    model_path = out / f"{key}.npz"
    save_surrogate(rhs, model_path, {"family": family, "feature_selection": feature_selection})
    err_path = out / f"{key}-errors.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["equation", "split", "mse", "linf"])
    for eq, split, mse, linf in rows:
        w.writerow([eq, split, f"{mse:.17g}", f"{linf:.17g}"])
    atomic_write_text(err_path, buf.getvalue())
    errors = {f"{eq}_{split}": {"mse": mse, "linf": linf} for eq, split, mse, linf in rows}
    return run.finish(name, [model_path, err_path], time.perf_counter() - t0,
                      fit_seconds=fit_seconds, fit_records=int(fit_rows.size), errors=errors,
                      schemas={"u": list(schemas[0]), "v": list(schemas[1])})


# --------------------------------------------------------------------------
# bifurcation

def bifurcation_key(provider: str, feature_selection: bool) -> str:
    return "fd" if provider == "fd" else model_key(provider, feature_selection)


def make_provider(run: RunDir, provider: str, feature_selection: bool):
    cfg = run.config
    g = cfg.grid
    if provider == "fd":
        return FdProvider(SpatialGrid(g.x0, g.x_end, g.fd_points))
    if provider not in FAMILIES:
        raise StageError(f"unknown provider {provider!r}")
    key = model_key(provider, feature_selection)
    run.require(f"train/{key}")
    rhs, _ = load_surrogate(run.path / "models" / f"{key}.npz")
    # derivative features were computed on the lattice, so the learned law is continued there
    return SurrogateProvider(rhs, lbm_grid(cfg), cfg.continuation.delta)


def starting_guess(cfg: RunConfig, grid: SpatialGrid, eps: float, lattice: bool):
    """Centred tanh front, relaxed by a lattice Boltzmann run for learned providers.

    Learned right-hand sides are only trustworthy near the data, and the
    bare front is far from any steady state on the coarse lattice, so the
    fine-scale simulator supplies the first Newton guess there.
    """
    ic = initial_profile(InitialConditionParams(1.0, 1.0, 0.5 * (cfg.grid.x0 + cfg.grid.x_end), 0.0), grid)
    if not lattice:
        return ic
    lcfg = LbmConfig(dt=cfg.data.dt, record_every=cfg.data.t_end, t_end=cfg.data.t_end, grid=grid)
    result = run_lbm_batch([ic], [eps], FhnParams(), lcfg)[0]
    if isinstance(result, LbmDivergence):
        raise StageError(f"lattice Boltzmann relaxation diverged at eps={eps:g}: {result}")
    return FieldState(result.u[-1], result.v[-1])


def continuation_config(cfg: RunConfig) -> ContinuationConfig:
    c = cfg.continuation
    return ContinuationConfig(ds=c.ds, tol=c.tol, max_steps=c.max_steps, eps_bounds=tuple(c.eps_bounds),
                              delta=c.delta, ds_max=c.ds_max, n_eigen=c.n_eigen)


def cmd_bifurcation(run: RunDir, provider: str, feature_selection: bool, resume: bool = False) -> dict:
    cfg = run.config
    key = bifurcation_key(provider, feature_selection)
    name = f"bifurcation/{key}"
    ccfg = continuation_config(cfg)
    start = cfg.continuation.start_eps
    if not ccfg.eps_bounds[0] <= start <= ccfg.eps_bounds[1]:
        raise StageError(f"start_eps={start} lies outside eps_bounds={ccfg.eps_bounds}")
    prov = make_provider(run, provider, feature_selection)
    if not run.begin(name, resume):
        return run.stage(name)
    t0 = time.perf_counter()
    guess = starting_guess(cfg, prov.grid, start, lattice=provider != "fd")
    try:
        branch = trace_branch(start, prov, ccfg, guess)
    except NewtonError as exc:
        run.abort(name)
        raise StageError(f"could not converge the starting solution: {exc}") from exc
    folds = detect_fold(branch)
    try:
        hopfs = detect_hopf(branch, prov, ccfg)
    except NewtonError as exc:
        log.warning("Hopf refinement failed: %s", exc)
        hopfs = []
    out = run.sub("bifurcation", key)
    arts = write_branch_outputs(branch, out, ccfg.n_eigen)
    critical = {
        "folds": [{"epsilon": f.epsilon, "arclength": f.arclength, "mean_u": f.mean_u} for f in folds],
        "hopf": [{"epsilon": h.epsilon, "frequency": h.frequency, "mean_u": h.mean_u} for h in hopfs],
        "termination": list(branch.termination),
        "n_points": len(branch),
        "grid_points": prov.grid.m,
    }
    atomic_write_json(out / "critical.json", critical)
    arts.append(out / "critical.json")
    from .plots import plot_branch
    fig_path = out / "diagram.png"
    plot_branch(branch, folds, hopfs, fig_path, title=key)
    arts.append(fig_path)
    return run.finish(name, arts, time.perf_counter() - t0,
                      folds=[f.epsilon for f in folds], hopf=[h.epsilon for h in hopfs])


def write_branch_outputs(branch: Branch, out: Path, n_eigen: int) -> list[Path]:
    write_branch(branch, out / "branch.csv", out / "profiles.csv", n_eigen)
    eps = branch.epsilon
    stable = np.array([p.stable for p in branch], dtype=int)
    arts = [out / "branch.csv", out / "profiles.csv"]
    for var in ("mean_u", "mean_v"):
        vals = np.array([getattr(p, var) for p in branch])
        path = out / f"diagram_{var}.csv"
        atomic_savetxt(path, np.column_stack([eps, vals, stable]).reshape(len(branch), 3),
                       ["%.17g", "%.17g", "%d"], f"epsilon,{var},stable")
        arts.append(path)
    return arts


# --------------------------------------------------------------------------
# report

def cmd_report(run: RunDir) -> str:
    """Assemble ``report/summary.txt`` from whatever stages have completed."""
    from .plots import plot_overview
    man = run.manifest()
    stages = man["stages"]
    lines = [f"run: {man['run_id']}", ""]
    missing = []

    def done(name):
        return stages.get(name, {}).get("complete", False)

    lines.append("stages")
    for n, st in stages.items():
        if n == "report":
            continue
        lines.append(f"  {n:<28s} {'complete' if st.get('complete') else 'incomplete':<11s}"
                     f" {st.get('seconds', float('nan')):10.1f} s")
    lines.append("")
    if done("generate"):
        g = stages["generate"]
        lines += [f"dataset: {g['n_records']} records from {g['n_trajectories']} trajectories;"
                  f" failed cells: {len(g['failed_cells'])}", ""]
    else:
        missing.append("generate")
    if done("select-features"):
        s = stages["select-features"]
        lines += [f"selected features: u-equation {tuple(s['subset_u'])}, v-equation {tuple(s['subset_v'])}", ""]
    else:
        missing.append("select-features")

    lines.append("training errors (mse / linf)")
    any_model = False
    for fam in FAMILIES:
        for fs in (False, True):
            key = model_key(fam, fs)
            if not done(f"train/{key}"):
                lines.append(f"  {key:<10s} absent")
                continue
            any_model = True
            st = stages[f"train/{key}"]
            e = st["errors"]
            cells = "  ".join(f"{k}: {e[k]['mse']:.3e} / {e[k]['linf']:.3e}" for k in sorted(e))
            fit = sum(st["fit_seconds"].values())
            lines.append(f"  {key:<10s} fit {fit:8.1f} s  {cells}")
    if not any_model:
        missing.append("train")
    lines.append("")

    lines.append("training-time ratio (fnn / rpnn)")
    for fs in (False, True):
        a, b = f"train/{model_key('rpnn', fs)}", f"train/{model_key('fnn', fs)}"
        label = "fs" if fs else "full"
        if done(a) and done(b):
            ratio = sum(stages[b]["fit_seconds"].values()) / sum(stages[a]["fit_seconds"].values())
            lines.append(f"  {label:<5s} {ratio:8.2f}")
        else:
            lines.append(f"  {label:<5s} absent")
    lines.append("")

    lines.append("critical points (epsilon)")
    branches = {}
    keys = ["fd"] + [model_key(f, fs) for f in FAMILIES for fs in (False, True)]
    for key in keys:
        name = f"bifurcation/{key}"
        if not done(name):
            lines.append(f"  {key:<10s} absent")
            continue
        st = stages[name]
        hopf = ", ".join(f"{h:.6f}" for h in st["hopf"]) or "none"
        fold = ", ".join(f"{f:.6f}" for f in st["folds"]) or "none"
        lines.append(f"  {key:<10s} Hopf {hopf:<22s} fold {fold}")
        branches[key] = run.path / "bifurcation" / key
    if not branches:
        missing.append("bifurcation")
    lines.append("")
    if missing:
        lines.append("missing stages: " + ", ".join(missing))
    text = "\n".join(lines) + "\n"
    out = run.sub("report")
    atomic_write_text(out / "summary.txt", text)
    arts = [out / "summary.txt"]
    if branches:
        plot_overview(branches, out / "bifurcation_mean_u.png", "mean_u")
        plot_overview(branches, out / "bifurcation_mean_v.png", "mean_v")
        arts += [out / "bifurcation_mean_u.png", out / "bifurcation_mean_v.png"]
    man = run.manifest()
    man["stages"]["report"] = {"complete": True,
                               "artifacts": {str(p.relative_to(run.path)): sha256_file(p) for p in arts}}
    run.save_manifest(man)
    return text
