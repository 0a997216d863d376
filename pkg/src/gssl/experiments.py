"""Sweeps over n for the synthetic label models, power-law fits, the spike
demonstration, the ill-posed regime check and the lattice-rate experiment."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyLabelsError, MemoryGuardError, UnreachableComponentError
from .graph import KernelSpec, build_eps_graph, eps_scale, estimate_nnz
from .random_walk import WalkConfig, cell_starts, lattice_walk_error
from .sampling import (DomainSpec, LabelFunction, LabelModelSpec, coordinate_function,
                       cosine_function, label_function, labels_from_indices,
                       sample_points, select_labels)
from .solvers import degeneracy_report, solve_hard

MODELS = ("model1", "model2", "spike-demo", "lattice", "mnist")
MAX_REDRAWS = 5


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class SweepConfig:
    model: str
    dimension: int = 2
    n_grid: list = field(default_factory=lambda: [2 ** k for k in range(10, 17)])
    beta_rule: dict = field(default_factory=lambda: {"kind": "constant", "value": 1.0})
    delta_rule: dict = field(default_factory=lambda: {"kind": "none"})
    eps_rule: str = "epsscale"
    trials: int = 20
    seed: int = 0
    kernel: str = "gaussian"
    domain: str = "unit-ball"
    label_radius: float = 0.5
    reference_beta: float = 0.5
    label_counts: list = field(default_factory=lambda: [10, 100, 1000])
    m_grid: list = field(default_factory=lambda: [2, 4, 8])
    lattice_eps: float = 0.01
    lattice_g: str = "x1"
    k: int = 10
    subsample: Optional[int] = 10_000
    full_data: bool = False
    data_dir: Optional[str] = None
    checksums: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        grid = list(self.n_grid)
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("n_grid must be strictly increasing")
        if self.beta_rule.get("kind") not in ("constant", "eps-power"):
            raise ValueError("beta_rule.kind must be 'constant' or 'eps-power'")
        if self.delta_rule.get("kind") not in ("none", "eps-power", "constant"):
            raise ValueError("delta_rule.kind must be 'none', 'constant' or 'eps-power'")
        if self.eps_rule not in ("epsscale", "spike"):
            raise ValueError("eps_rule must be 'epsscale' or 'spike'")

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def eps(self, n: int) -> float:
        if self.eps_rule == "spike":
            return 2.0 * math.sqrt(math.log(n) / n)
        return eps_scale(n, self.dimension)

    def beta(self, eps: float) -> float:
        r = self.beta_rule
        return float(r["value"]) if r["kind"] == "constant" else eps ** float(r["a"])

    def delta(self, eps: float) -> Optional[float]:
        r = self.delta_rule
        if r["kind"] == "none":
            return None
        if r["kind"] == "constant":
            return float(r["value"])
        return eps ** float(r["a"])

    def label_spec(self, eps: float) -> LabelModelSpec:
        if self.model == "model1":
            return LabelModelSpec("subset", self.beta(eps), radius=self.label_radius)
        return LabelModelSpec("boundary-band", self.beta(eps), delta=self.delta(eps) or eps)

    def graph_key(self):
        return (self.dimension, self.domain, self.kernel, self.eps_rule, self.seed)


@dataclass(frozen=True)
class ExperimentRecord:
    n: int
    eps: float
    beta: float
    delta: float
    trial: int
    trial_seed: int
    labels: int
    max_error: float
    max_error_outside: float
    degeneracy_index: float
    iterations: int
    redraws: int
    failed: bool


@dataclass(frozen=True)
class RateFit:
    alpha: float
    intercept: float
    r_squared: float
    points_used: int
    variable: str = "epsilon"
    slope: float = float("nan")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class SweepResult:
    config: SweepConfig
    records: list
    timings: list

    @property
    def failures(self) -> int:
        return sum(r.failed for r in self.records)


def trial_seeds(seed: int, n: int, trial: int, redraw: int = 0):
    """(cloud seed, label seed) for one grid cell, independent of grid extent."""
    cloud = np.random.SeedSequence([seed, n, trial]).generate_state(1, np.uint64)[0]
    label = np.random.SeedSequence([seed, n, trial, 1 + redraw]).generate_state(1, np.uint64)[0]
    return int(cloud), int(label)


def available_memory() -> int:
    try:
        with open("/proc/meminfo") as fh:
            for line in fh:
                if line.startswith("MemAvailable:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")


def memory_estimate(cfg: SweepConfig, n: int) -> int:
    d = cfg.dimension
    dom = DomainSpec(cfg.domain, d)
    radius = KernelSpec(cfg.kernel, cfg.eps(n)).cutoff
    nnz = estimate_nnz(n, d, radius, dom.volume)
    return int(nnz * (4 + 8) * 1.15 + n * 8 * 40)


def check_memory(cfg: SweepConfig, n: int, budget: Optional[int] = None):
    need = memory_estimate(cfg, n)
    have = available_memory() if budget is None else budget
    if need > have:
        raise MemoryGuardError(
            f"n={n} needs about {need / 2**30:.2f} GiB for the graph, {have / 2**30:.2f} GiB available")


# ---------------------------------------------------------------------------
# synthetic sweeps
# ---------------------------------------------------------------------------

def _truth(cfg: SweepConfig) -> LabelFunction:
    return label_function(cfg.model, cfg.dimension)


def _cell(cfgs: Sequence[SweepConfig], n: int, trial: int):
    base = cfgs[0]
    cloud_seed, _ = trial_seeds(base.seed, n, trial)
    dom = DomainSpec(base.domain, base.dimension)
    eps = base.eps(n)
    t0 = time.perf_counter()
    cloud = sample_points(dom, n, cloud_seed)
    graph = build_eps_graph(cloud, KernelSpec(base.kernel, eps))
    t_graph = time.perf_counter() - t0
    out = []
    for cfg in cfgs:
        t1 = time.perf_counter()
        g = _truth(cfg)
        gx = g(cloud.points)
        spec = cfg.label_spec(eps)
        spec.check_scale(eps)
        if spec.beta == 0.0:
            raise EmptyLabelsError("beta = 0 gives an empty label set")
        rec = None
        for redraw in range(MAX_REDRAWS):
            _, label_seed = trial_seeds(cfg.seed, n, trial, redraw)
            labels = select_labels(cloud, spec, g, label_seed)
            try:
                res = solve_hard(graph, labels)
            except (UnreachableComponentError, EmptyLabelsError):
                continue
            err = np.abs(res.u - gx)
            outside = ~spec.region(cloud)
            rep = degeneracy_report(graph, labels, res.u, gx)
            rec = ExperimentRecord(n, eps, spec.beta, spec.delta or 0.0, trial, label_seed,
                                   len(labels), float(err.max()),
                                   float(err[outside].max()) if outside.any() else 0.0,
                                   rep.index, res.iterations, redraw, False)
            break
        if rec is None:
            rec = ExperimentRecord(n, eps, spec.beta, spec.delta or 0.0, trial, label_seed,
                                   0, float("nan"), float("nan"), float("nan"), 0,
                                   MAX_REDRAWS, True)
        out.append((rec, t_graph + time.perf_counter() - t1))
    return out


def run_sweeps(cfgs: Sequence[SweepConfig], workers: int = 1, memory_budget=None,
               progress=None) -> list:
    """Run several sweeps, sharing the cloud and graph of each (n, trial) cell
    between configurations that draw identical point clouds."""
    cfgs = list(cfgs)
    for cfg in cfgs:
        if cfg.model not in ("model1", "model2"):
            raise ValueError("run_sweep handles model1 and model2; see spike_demo/lattice/mnist")
        check_memory(cfg, max(cfg.n_grid), memory_budget)
    groups = {}
    for i, cfg in enumerate(cfgs):
        groups.setdefault(cfg.graph_key(), []).append(i)
    results = [SweepResult(cfg, [], []) for cfg in cfgs]
    jobs = []
    for members in groups.values():
        cells = sorted({(n, t) for i in members for n in cfgs[i].n_grid
                        for t in range(cfgs[i].trials)})
        for n, t in cells:
            active = [i for i in members if n in cfgs[i].n_grid and t < cfgs[i].trials]
            jobs.append((active, n, t))

    def consume(active, n, t, out):
        for i, (rec, wall) in zip(active, out):
            results[i].records.append(rec)
            results[i].timings.append((n, t, wall))
        if progress:
            progress(n, t)

    if workers > 1:
        # fork is unsafe once the OpenMP runtime is live
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futs = [(a, n, t, pool.submit(_cell, [cfgs[i] for i in a], n, t)) for a, n, t in jobs]
            for a, n, t, f in futs:
                consume(a, n, t, f.result())
    else:
        for a, n, t in jobs:
            consume(a, n, t, _cell([cfgs[i] for i in a], n, t))
    for r in results:
        order = sorted(range(len(r.records)), key=lambda k: (r.records[k].n, r.records[k].trial))
        r.records = [r.records[k] for k in order]
        r.timings = [r.timings[k] for k in order]
    return results


def run_sweep(cfg: SweepConfig, workers: int = 1, memory_budget=None, progress=None) -> SweepResult:
    """Sample, build the epsilon-graph, draw labels, solve, and record the
    max error against the exact label function, for every (n, trial)."""
    return run_sweeps([cfg], workers, memory_budget, progress)[0]


def summarize(records: Sequence[ExperimentRecord]) -> list:
    """Per-n means over successful trials."""
    out = []
    for n in sorted({r.n for r in records}):
        rs = [r for r in records if r.n == n and not r.failed]
        failed = sum(1 for r in records if r.n == n and r.failed)
        if not rs:
            out.append({"n": n, "eps": float("nan"), "mean_error": float("nan"),
                        "mean_error_outside": float("nan"), "mean_index": float("nan"),
                        "trials": 0, "failed": failed})
            continue
        idx = np.array([r.degeneracy_index for r in rs])
        out.append({"n": n, "eps": rs[0].eps,
                    "mean_error": float(np.mean([r.max_error for r in rs])),
                    "mean_error_outside": float(np.mean([r.max_error_outside for r in rs])),
                    "mean_index": float(np.nanmean(idx)) if np.isfinite(idx).any() else float("nan"),
                    "trials": len(rs), "failed": failed})
    return out


# ---------------------------------------------------------------------------
# power-law fits
# ---------------------------------------------------------------------------

def fit_power_law_xy(x, y, variable: str = "epsilon") -> RateFit:
    """Least squares of log y on log x.  For ``epsilon`` alpha is the slope
    (error ~ eps^alpha); for ``n`` and ``m`` it is minus the slope
    (error ~ n^-alpha); for ``growth`` it is the slope."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0) or np.any(x <= 0) or not np.all(np.isfinite(y)):
        raise ValueError("power-law fit needs positive finite values")
    if np.unique(x).size < 3:
        raise ValueError("power-law fit needs at least 3 distinct abscissae")
    lx, ly = np.log(x), np.log(y)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ np.array([slope, icpt])
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - float(np.sum(resid ** 2) / ss) if ss > 0 else 1.0
    alpha = slope if variable in ("epsilon", "growth") else -slope
    return RateFit(float(alpha), float(icpt), r2, int(x.size), variable, float(slope))


def fit_power_law(records, variable: str = "epsilon", drop_warmup: bool = True,
                  key: str = "max_error") -> RateFit:
    """Fit the per-n mean error; drops the smallest n when >= 5 points exist."""
    if variable not in ("epsilon", "n"):
        raise ValueError("records can be fitted against 'epsilon' or 'n'")
    for r in records:
        v = getattr(r, key)
        if not r.failed and not v > 0:
            raise ValueError("errors must be positive to fit a power law")
    rows = [s for s in summarize(records) if s["trials"] > 0]
    mean_key = "mean_error" if key == "max_error" else "mean_error_outside"
    if drop_warmup and len(rows) >= 5:
        rows = rows[1:]
    x = [r["eps"] if variable == "epsilon" else r["n"] for r in rows]
    return fit_power_law_xy(x, [r[mean_key] for r in rows], variable)


# ---------------------------------------------------------------------------
# ill-posed regime
# ---------------------------------------------------------------------------

@dataclass
class IllposedVerdict:
    verdict: str
    top_error_drop: float
    index_ratio: float
    summary: list
    reference_summary: list

    def to_dict(self):
        return dataclasses.asdict(self)


def illposed_check(cfg: SweepConfig, reference: Optional[SweepResult] = None,
                   result: Optional[SweepResult] = None, workers: int = 1) -> IllposedVerdict:
    """Compare a sweep against the beta = ``cfg.reference_beta`` sweep on the same grid.

    ``degenerate``: the error falls by less than 10% over the top octave of n
    and the degeneracy index at the largest n is below half the reference.
    """
    if cfg.beta_rule["kind"] == "constant" and float(cfg.beta_rule["value"]) <= 0:
        raise EmptyLabelsError("beta = 0 gives an empty label set")
    ref_cfg = dataclasses.replace(cfg, beta_rule={"kind": "constant", "value": cfg.reference_beta})
    pending = []
    if result is None:
        pending.append(cfg)
    if reference is None:
        pending.append(ref_cfg)
    if pending:
        out = run_sweeps(pending, workers)
        if result is None:
            result = out.pop(0)
        if reference is None:
            reference = out.pop(0)
    s = summarize(result.records)
    sr = summarize(reference.records)
    top, prev = s[-1], _octave_below(s)
    drop = (prev["mean_error"] - top["mean_error"]) / prev["mean_error"]
    ratio = top["mean_index"] / sr[-1]["mean_index"]
    if drop < 0.10 and ratio < 0.5:
        verdict = "degenerate"
    elif drop >= 0.10 and ratio >= 0.5:
        verdict = "convergent"
    else:
        verdict = "inconclusive"
    return IllposedVerdict(verdict, float(drop), float(ratio), s, sr)


def _octave_below(summary):
    top = summary[-1]["n"]
    cands = [s for s in summary[:-1] if s["n"] <= top // 2]
    if not cands:
        raise ValueError("the n-grid needs a point at or below half of its largest n")
    return cands[-1]


# ---------------------------------------------------------------------------
# spike demonstration
# ---------------------------------------------------------------------------

@dataclass
class SpikeCase:
    labels: int
    result: object
    report: object
    label_indices: np.ndarray


def spike_demo(n: int, label_counts: Sequence[int], seed: int, eps: Optional[float] = None,
               kernel: str = "gaussian"):
    """Laplace learning of cos(x . e1) on n uniform points of the unit square
    with nested uniformly random label sets of the given sizes."""
    if any(c > n or c < 1 for c in label_counts):
        raise ValueError("label counts must lie in [1, n]")
    cloud_seed, label_seed = trial_seeds(seed, n, 0)
    cloud = sample_points(DomainSpec("unit-cube", 2), n, cloud_seed)
    eps = 2.0 * math.sqrt(math.log(n) / n) if eps is None else eps
    graph = build_eps_graph(cloud, KernelSpec(kernel, eps))
    g = cosine_function()
    gx = g(cloud.points)
    perm = np.random.default_rng(label_seed).permutation(n)
    cases = []
    for c in label_counts:
        labels = labels_from_indices(cloud, perm[:c], g)
        res = solve_hard(graph, labels)
        cases.append(SpikeCase(c, res, degeneracy_report(graph, labels, res.u, gx),
                               labels.indices))
    return cloud, graph, cases


# ---------------------------------------------------------------------------
# lattice rate
# ---------------------------------------------------------------------------

def lattice_function(name: str, eps: float) -> LabelFunction:
    if name == "x1":
        return coordinate_function(0)
    if name == "kink":
        c = 0.5 * eps
        return LabelFunction(lambda X: np.abs(X[:, 0] - c), name="kink")
    raise ValueError(f"unknown lattice label function {name!r}")


@dataclass
class LatticeResult:
    rows: dict
    error_fit: RateFit
    time_fit: RateFit

    def summary(self):
        return [{"m": m, "sup_error": max(r.error for r in rs),
                 "mean_hitting_time": float(np.mean([r.mean_hitting_time for r in rs])),
                 "censored_fraction": float(np.mean([r.censored_fraction for r in rs]))}
                for m, rs in sorted(self.rows.items())]


def lattice_rate(d: int, eps: float, m_grid: Sequence[int], g_name: str, trials: int,
                 seed: int, max_starts: Optional[int] = None) -> LatticeResult:
    """sup over off-sublattice starts of one cell of |E g(X_tau) - g(x)|, and
    the mean hitting time, fitted against m."""
    g = lattice_function(g_name, eps)
    rows = {}
    for m in m_grid:
        starts = cell_starts(d, eps, m)
        sites = np.rint(starts / eps).astype(np.int64)
        starts = starts[np.any(sites % m != 0, axis=1)]
        if max_starts is not None and starts.shape[0] > max_starts:
            pick = np.linspace(0, starts.shape[0] - 1, max_starts).round().astype(int)
            starts = starts[pick]
        rows[m] = lattice_walk_error(d, eps, m, g, starts,
                                     WalkConfig(trials=trials, seed=seed + 7919 * m))
    res = LatticeResult(rows, None, None)
    s = res.summary()
    ms = [r["m"] for r in s]
    res.error_fit = fit_power_law_xy(ms, [max(r["sup_error"], 1e-300) for r in s], "growth")
    res.time_fit = fit_power_law_xy(ms, [r["mean_hitting_time"] for r in s], "growth")
    return res


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_records(path, records):
    names = [f.name for f in dataclasses.fields(ExperimentRecord)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in names])


def write_rows(path, rows: list):
    if not rows:
        open(path, "w").close()
        return
    names = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in names])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_sweep_outputs(outdir, result: SweepResult, fit: Optional[RateFit]):
    write_records(os.path.join(outdir, "records.csv"), result.records)
    write_rows(os.path.join(outdir, "error_vs_n.csv"), summarize(result.records))
    write_json(os.path.join(outdir, "ratefit.json"), fit.to_dict() if fit else None)
    write_rows(os.path.join(outdir, "timings.csv"),
               [{"n": n, "trial": t, "seconds": round(s, 3)} for n, t, s in result.timings])
