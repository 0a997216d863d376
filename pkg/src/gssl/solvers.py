"""Hard- and soft-constrained Laplace learning, p-Laplace learning via IRLS,
and the degeneracy diagnostics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import ConvergenceError, EmptyLabelsError, UnreachableComponentError
from .graph import SparseGraph, connected_components, dirichlet_energy
from .sampling import LabelSet

TOL = 1e-10
PLAP_TOL = 1e-6
WEIGHT_FLOOR = 1e-12
SPIKE_IQR_FACTOR = 5.0


@dataclass
class SolveResult:
    u: np.ndarray
    iterations: int
    residual: float
    energy: float
    method: str
    params: dict = field(default_factory=dict)
    energy_history: list = field(default_factory=list)
    converged: bool = True

    def stats(self) -> dict:
        out = {"method": self.method, "iterations": int(self.iterations),
               "residual": float(self.residual), "energy": float(self.energy),
               "converged": bool(self.converged)}
        out.update(self.params)
        return out


@dataclass(frozen=True)
class DegeneracyReport:
    degenerate_mean: float
    index: float
    spike_count: int

    def to_dict(self):
        return {"degenerate_mean": self.degenerate_mean,
                "index": None if math.isnan(self.index) else self.index,
                "spike_count": self.spike_count}


def iteration_cap(unknowns: int) -> int:
    return int(10 * math.sqrt(max(unknowns, 0)) + 1000)


# ---------------------------------------------------------------------------
# preconditioned conjugate gradient on full-length vectors
# ---------------------------------------------------------------------------

def pcg(apply, b, x0, diag, free, tol=TOL, maxiter=None, scaled=False):
    """Jacobi-preconditioned CG for SPD systems posed on the ``free`` entries.

    ``b``/``x0`` are (n,) or (n, m); entries outside ``free`` are ignored and
    returned as zero.  Each column is an independent system.  Convergence is
    judged on the true residual ||b - A x|| / ||b|| after the recursion
    reports convergence; with ``scaled`` both vectors are first divided by
    the diagonal, which matters when its entries span many decades.
    Returns (x, iterations, relative residuals).
    """
    single = b.ndim == 1
    B = b[:, None] if single else b
    X = (x0[:, None] if single else x0).astype(np.float64, copy=True)
    X[~free] = 0.0
    B = np.where(free[:, None], B, 0.0)
    inv = np.zeros_like(diag)
    inv[free] = 1.0 / diag[free]
    inv = inv[:, None]
    nw = inv if scaled else 1.0
    bnorm = np.linalg.norm(nw * B, axis=0)
    scale = np.where(bnorm > 0, bnorm, 1.0)
    if maxiter is None:
        maxiter = iteration_cap(int(free.sum()))

    R = B - apply(X)
    rel = np.linalg.norm(nw * R, axis=0) / scale
    it = 0
    while True:
        active = rel > tol
        if not active.any() or it >= maxiter:
            break
        Z = inv * R
        P = Z.copy()
        rz = np.einsum("ij,ij->j", R, Z)
        while it < maxiter:
            Q = apply(P)
            pq = np.einsum("ij,ij->j", P, Q)
            alpha = np.divide(rz, pq, out=np.zeros_like(rz), where=active & (pq > 0))
            X += P * alpha
            R -= Q * alpha
            it += 1
            rnorm = np.linalg.norm(nw * R, axis=0) / scale
            active &= rnorm > tol
            if not active.any():
                break
            Z = inv * R
            rz_new = np.einsum("ij,ij->j", R, Z)
            beta = np.divide(rz_new, rz, out=np.zeros_like(rz), where=active & (rz > 0))
            P = Z + P * beta
            rz = rz_new
        R = B - apply(X)
        rel = np.linalg.norm(nw * R, axis=0) / scale
    X[~free] = 0.0
    if single:
        return X[:, 0], it, rel
    return X, it, rel


def _laplace_operator(indptr, indices, data, deg, free, block=False):
    if block:
        return lambda X: K.masked_apply_block(indptr, indices, data, deg, free,
                                              np.ascontiguousarray(X))
    return lambda X: K.masked_apply(indptr, indices, data, deg, free,
                                    np.ascontiguousarray(X[:, 0]))[:, None]


def _diag(graph: SparseGraph, data=None, deg=None):
    data = graph.data if data is None else data
    deg = graph.degrees if deg is None else deg
    diag = deg.copy()
    rows = np.repeat(np.arange(graph.n), np.diff(graph.indptr))
    self_loop = rows == graph.indices
    diag[rows[self_loop]] -= data[self_loop]
    return diag


def check_labels(graph: SparseGraph, labels: LabelSet):
    if len(labels) == 0:
        raise EmptyLabelsError("empty label set")
    comp = connected_components(graph)
    seen = np.zeros(comp.max() + 1, dtype=bool)
    seen[comp[labels.indices]] = True
    missing = np.flatnonzero(~seen)
    if missing.size:
        raise UnreachableComponentError(
            f"unreachable component: {missing.size} connected component(s) have no label",
            components=missing.tolist())


def degenerate_mean(graph: SparseGraph, labels: LabelSet) -> float:
    """Degree-weighted mean of the labels."""
    if len(labels) == 0:
        raise EmptyLabelsError("empty label set")
    d = graph.degrees[labels.indices]
    return float(np.sum(d * labels.values) / np.sum(d))


def _energy(graph, u, p=2.0):
    return dirichlet_energy(graph, u, p, graph.n, graph.epsilon or 1.0)


def _weighted_harmonic(graph, data, deg, labels, free, x0, tol=TOL):
    """Solve the Laplace problem with edge weights ``data`` and label data."""
    n = graph.n
    f = np.zeros(n)
    f[labels.indices] = labels.values
    fixed = ~free
    # b = W_UZ g on free rows
    b = -K.masked_apply(graph.indptr, graph.indices, data, deg * fixed, free, f)
    op = _laplace_operator(graph.indptr, graph.indices, data, deg, free)
    x, it, rel = pcg(op, b, x0 * free, _diag(graph, data, deg), free, tol)
    u = np.where(free, x, f)
    return u, it, float(rel[0])


def solve_hard(graph: SparseGraph, labels: LabelSet, tol: float = TOL) -> SolveResult:
    """Laplace learning: graph-harmonic on unlabeled nodes, u = g on labels."""
    check_labels(graph, labels)
    free = ~labels.mask(graph.n)
    if not free.any():
        u = labels.dense(graph.n)
        return SolveResult(u, 0, 0.0, _energy(graph, u), "hard-laplace")
    ybar = degenerate_mean(graph, labels)
    u, it, rel = _weighted_harmonic(graph, graph.data, graph.degrees, labels, free,
                                    np.full(graph.n, ybar), tol)
    res = SolveResult(u, it, rel, _energy(graph, u), "hard-laplace", converged=rel <= tol)
    if rel > tol:
        raise ConvergenceError(f"conjugate gradient stopped at relative residual {rel:.3e}",
                               residual=rel, result=res)
    return res


def solve_hard_multi(graph: SparseGraph, indices, values, tol: float = TOL):
    """Several label vectors sharing one labeled set, solved as a CG block.

    ``values`` has shape (len(indices), m).  Returns (U, iterations, residuals).
    """
    n = graph.n
    idx = np.asarray(indices, dtype=np.int64)
    V = np.asarray(values, dtype=float)
    probe = LabelSet(idx, V[:, 0], n=n)
    check_labels(graph, probe)
    free = ~probe.mask(n)
    F = np.zeros((n, V.shape[1]))
    F[probe.indices] = V[np.argsort(idx, kind="stable")] if idx.size else V
    if not free.any():
        return F, 0, np.zeros(V.shape[1])
    fixed = ~free
    B = -K.masked_apply_block(graph.indptr, graph.indices, graph.data,
                              graph.degrees * fixed, free, F)
    d = graph.degrees[probe.indices]
    ybar = (d[:, None] * F[probe.indices]).sum(axis=0) / d.sum()
    X0 = np.broadcast_to(ybar, F.shape) * free[:, None]
    op = _laplace_operator(graph.indptr, graph.indices, graph.data, graph.degrees, free,
                           block=True)
    X, it, rel = pcg(op, B, X0, _diag(graph), free, tol)
    U = np.where(free[:, None], X, F)
    if np.any(rel > tol):
        raise ConvergenceError(f"block CG stopped at relative residual {rel.max():.3e}",
                               residual=float(rel.max()))
    return U, it, rel


def solve_soft(graph: SparseGraph, labels: LabelSet, lam: float, n: Optional[int] = None,
               eps: Optional[float] = None, tol: float = TOL) -> SolveResult:
    """Minimise (1/(n^2 eps^2)) sum w_ij (u_i-u_j)^2 + (lam/|labels|) sum (u_i - g_i)^2."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    check_labels(graph, labels)
    n = graph.n if n is None else n
    eps = (graph.epsilon or 1.0) if eps is None else eps
    # normal equations scaled by n^2 eps^2 / 2: (L + c P) u = c P g
    c = lam * n * n * eps * eps / (2.0 * len(labels))
    mask = labels.mask(graph.n).astype(float)
    g = labels.dense(graph.n)
    free = np.ones(graph.n, dtype=bool)

    def op(X):
        return K.masked_apply(graph.indptr, graph.indices, graph.data, graph.degrees, free,
                              np.ascontiguousarray(X[:, 0]))[:, None] + c * mask[:, None] * X

    x0 = np.full(graph.n, degenerate_mean(graph, labels))
    u, it, rel = pcg(op, c * mask * g, x0, _diag(graph) + c * mask, free, tol, scaled=True)
    rel = float(rel[0])
    energy = _energy(graph, u, 2.0) + lam / len(labels) * float(np.sum((u - g)[labels.indices] ** 2))
    res = SolveResult(u, it, rel, energy, "soft-laplace", {"lambda": lam}, converged=rel <= tol)
    if rel > tol:
        raise ConvergenceError(f"conjugate gradient stopped at relative residual {rel:.3e}",
                               residual=rel, result=res)
    return res


# ---------------------------------------------------------------------------
# p-Laplacian
# ---------------------------------------------------------------------------

def plap_residual(graph: SparseGraph, u, p: float, free) -> float:
    """||r_U|| / ||m_U|| with r_i = sum_j w_ij |du|^(p-2) du, m_i = sum_j w_ij |du|^(p-1)."""
    r, m = K.plap_rows(graph.indptr, graph.indices, graph.data, u, float(p))
    denom = np.linalg.norm(m[free])
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(r[free]) / denom)


def p_schedule(p: float, factor: float = 1.5):
    """Homotopy 2 -> p in multiplicative steps of at most ``factor``."""
    out = []
    q = 2.0
    while not math.isclose(q, p):
        q = min(p, q * factor) if p > 2 else max(p, q / factor)
        out.append(q)
    return out


def _plap_stage(graph, labels, free, u, p, tol, max_outer):
    raw = lambda v: float(np.sum(K.row_energy(graph.indptr, graph.indices, graph.data, v, p)))
    E = raw(u)
    history = [E]
    rel = plap_residual(graph, u, p, free)
    it = 0
    t0 = min(1.0, 1.0 / (p - 1.0))
    while rel > tol and it < max_outer:
        a = K.irls_weights(graph.indptr, graph.indices, graph.data, u, p, WEIGHT_FLOOR)
        deg = K.row_sums(graph.indptr, a)
        v, _, _ = _weighted_harmonic(graph, a, deg, labels, free, u)
        step = v - u
        t = t0
        accepted = False
        for _ in range(40):
            cand = u + t * step
            Ec = raw(cand)
            if Ec <= E:
                accepted = True
                break
            t *= 0.5
        it += 1
        if not accepted:
            break
        u, E = cand, Ec
        history.append(E)
        rel = plap_residual(graph, u, p, free)
    return u, it, rel, history


def solve_plap(graph: SparseGraph, labels: LabelSet, p: float, tol: float = PLAP_TOL,
               max_outer: int = 200) -> SolveResult:
    """Minimise the p-Dirichlet energy subject to u = g on the labels.

    Iteratively reweighted least squares with a homotopy in p started from the
    p = 2 solution.  Each step moves toward the reweighted harmonic extension
    with a backtracking line search that never increases the energy.
    """
    if not p > 1:
        raise ValueError("p must exceed 1")
    base = solve_hard(graph, labels)
    n, eps = graph.n, graph.epsilon or 1.0
    if p == 2.0:
        return SolveResult(base.u, base.iterations, plap_residual(graph, base.u, 2.0,
                           ~labels.mask(graph.n)), base.energy, "p-laplace", {"p": 2.0},
                           [base.energy])
    free = ~labels.mask(graph.n)
    u = base.u
    total = 0
    history = []
    rel = 0.0
    for q in p_schedule(p):
        stage_tol = tol if q == p else max(tol, 1e-3)
        u, it, rel, hist = _plap_stage(graph, labels, free, u, q, stage_tol, max_outer)
        total += it
        history.append({"p": q, "energy": [h / (n * n * eps ** q) for h in hist]})
    energy = dirichlet_energy(graph, u, p, n, eps)
    res = SolveResult(u, total, rel, energy, "p-laplace", {"p": p}, history,
                      converged=rel <= tol)
    if rel > tol:
        raise ConvergenceError(f"IRLS stopped at relative p-Laplacian residual {rel:.3e}",
                               residual=rel, result=res)
    return res


# ---------------------------------------------------------------------------
# diagnostics and output
# ---------------------------------------------------------------------------

def degeneracy_report(graph: SparseGraph, labels: LabelSet, u, g_all=None) -> DegeneracyReport:
    """Degree-weighted label mean, degeneracy index and spike count.

    ``g_all`` holds the true label function at every node; without it the
    index compares against the spread of the given labels.
    """
    ybar = degenerate_mean(graph, labels)
    u = np.asarray(u, dtype=float)
    free = ~labels.mask(graph.n)
    if not free.any():
        return DegeneracyReport(ybar, 1.0, 0)
    num = np.median(np.abs(u[free] - ybar))
    ref = (np.asarray(g_all, dtype=float)[free] if g_all is not None else labels.values)
    den = np.median(np.abs(ref - ybar))
    index = float(num / den) if den > 0 else float("nan")
    q1, q3 = np.percentile(u[free], [25, 75])
    spikes = int(np.sum(np.abs(u[labels.indices] - ybar) > SPIKE_IQR_FACTOR * (q3 - q1)))
    return DegeneracyReport(ybar, index, spikes)


def write_solution(path_csv, path_json, result: SolveResult, labels: LabelSet,
                   points=None, report: Optional[DegeneracyReport] = None):
    n = result.u.shape[0]
    mask = labels.mask(n)
    g = labels.dense(n)
    d = 0 if points is None else points.shape[1]
    with open(path_csv, "w") as fh:
        fh.write(",".join(["node"] + [f"x{k}" for k in range(d)] + ["labeled", "g", "u"]) + "\n")
        for i in range(n):
            row = [str(i)] + ([repr(float(v)) for v in points[i]] if d else [])
            row += ["1" if mask[i] else "0", repr(float(g[i])) if mask[i] else "",
                    repr(float(result.u[i]))]
            fh.write(",".join(row) + "\n")
    stats = result.stats()
    if report is not None:
        stats["degeneracy"] = report.to_dict()
    with open(path_json, "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
