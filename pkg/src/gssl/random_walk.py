"""Graph random walks, the representation formula, and the lazy lattice walk."""
from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .errors import CensoredError, UnreachableComponentError
from .graph import SparseGraph, connected_components
from .sampling import LabelFunction, LabelSet


@dataclass(frozen=True)
class WalkConfig:
    trials: int = 10_000
    seed: int = 0
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class HittingStats:
    mean_payoff: float
    standard_error: float
    mean_hitting_time: float
    censored_fraction: float
    mean_displacement: float


@dataclass(frozen=True)
class LatticeRow:
    start: tuple
    on_sublattice: bool
    error: float
    standard_error: float
    mean_hitting_time: float
    censored_fraction: float
    mean_displacement: float


def _cumulative(graph: SparseGraph) -> np.ndarray:
    cum = graph.meta.get("_cumw")
    if cum is None:
        cum = K.row_cumsum(graph.indptr, graph.data)
        graph.meta["_cumw"] = cum
    return cum


def walk_step(graph: SparseGraph, current: int, rng) -> int:
    """One transition: y is drawn with probability w_xy / d_x (self-loop included).

    ``rng`` is a numpy Generator or a (key, counter) pair for the counter-based stream.
    """
    if not graph.degrees[current] > 0:
        raise ValueError(f"node {current} has zero degree")
    cum = _cumulative(graph)
    if isinstance(rng, tuple):
        r = K.uniform_at(np.uint64(rng[0]), np.uint64(rng[1]))
    else:
        r = rng.random()
    lo, hi = graph.indptr[current], graph.indptr[current + 1]
    pos = lo + int(np.searchsorted(cum[lo:hi], r * graph.degrees[current], side="right"))
    return int(graph.indices[min(pos, hi - 1)])


def _summarise(payoff, hit, disp, censored, trials) -> HittingStats:
    ok = ~censored
    frac = float(censored.sum()) / trials
    if not ok.any():
        raise CensoredError("every walk was censored before reaching a label", frac)
    vals = payoff[ok]
    se = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return HittingStats(float(np.mean(vals)), se, float(np.mean(hit)), frac,
                        float(np.mean(disp)))


def estimate_solution(graph: SparseGraph, labels: LabelSet, start: int, cfg: WalkConfig,
                      points=None) -> HittingStats:
    """Monte Carlo value of E[g(X_tau) | X_0 = start] with tau the first label hit."""
    labeled = labels.mask(graph.n)
    values = labels.dense(graph.n)
    if labeled[start]:
        return HittingStats(float(values[start]), 0.0, 0.0, 0.0, 0.0)
    comp = connected_components(graph)
    if not np.any(labeled & (comp == comp[start])):
        raise UnreachableComponentError(f"no label reachable from node {start}",
                                        components=[int(comp[start])])
    max_steps = cfg.max_steps or 50 * graph.n
    pts = np.zeros((graph.n, 0)) if points is None else np.ascontiguousarray(points, float)
    payoff, hit, disp, cens = K.graph_walks(
        graph.indptr, graph.indices, _cumulative(graph), graph.degrees, labeled, values,
        pts, int(start), int(cfg.trials), int(max_steps), np.uint64(cfg.seed),
        np.uint64(start))
    return _summarise(payoff, hit, disp, cens, cfg.trials)


def lattice_walk_error(d: int, eps: float, m: int, g: LabelFunction,
                       starts: Sequence, cfg: WalkConfig) -> list:
    """Per-start error |E[g(X_tau)] - g(x)| of the lazy walk on eps Z^d.

    Labels sit on the sublattice m eps Z^d; tau is the first positive time on
    it.  The walk lives on a torus of side 64 m (lattice units) and payoffs
    use the unwrapped position.  Starts are rounded to the nearest site.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    side = 64 * m
    max_steps = cfg.max_steps or 50 * m ** (2 + d)
    rows = []
    for idx, x in enumerate(starts):
        site = np.rint(np.asarray(x, dtype=float) / eps).astype(np.int64)
        if site.shape != (d,):
            raise ValueError("start dimension mismatch")
        on = bool(np.all(site % m == 0))
        wrapped = np.mod(site, side)
        end, shift, hit, cens = K.lattice_walks(wrapped, int(m), int(side), int(cfg.trials),
                                                int(max_steps), np.uint64(cfg.seed),
                                                np.uint64(idx))
        pos = (site + shift) * eps
        g0 = float(g(site * eps))
        disp = np.linalg.norm(shift, axis=1) * eps
        st = _summarise(g(pos), hit, disp, cens, cfg.trials)
        err = 0.0 if on else abs(st.mean_payoff - g0)
        rows.append(LatticeRow(tuple(int(s) for s in site), on, err,
                               0.0 if on else st.standard_error, st.mean_hitting_time,
                               st.censored_fraction, st.mean_displacement))
    return rows


def cell_starts(d: int, eps: float, m: int, origin=None) -> np.ndarray:
    """All sites of one sublattice cell [0, m)^d, in physical coordinates."""
    grids = np.meshgrid(*[np.arange(m)] * d, indexing="ij")
    sites = np.stack([gr.ravel() for gr in grids], axis=1)
    base = np.zeros(d, dtype=np.int64) if origin is None else np.asarray(origin, np.int64)
    return (sites + base) * eps


def write_hitting_csv(path, starts, stats):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start", "mean_payoff", "standard_error", "mean_hitting_time",
                    "censored_fraction", "mean_displacement"])
        for s, st in zip(starts, stats):
            w.writerow([s] + [repr(v) for v in asdict(st).values()])


def write_lattice_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start", "on_sublattice", "error", "standard_error", "mean_hitting_time",
                    "censored_fraction", "mean_displacement"])
        for r in rows:
            w.writerow([" ".join(map(str, r.start)), int(r.on_sublattice), repr(r.error),
                        repr(r.standard_error), repr(r.mean_hitting_time),
                        repr(r.censored_fraction), repr(r.mean_displacement)])
