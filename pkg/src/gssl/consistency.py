"""Kernel moments, nonlocal and continuum operators, boundary corrections and
the per-node graph statistics used in the pointwise consistency study."""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import QuadratureError
from .graph import GridIndex, KernelSpec, SparseGraph
from .sampling import Density, DomainSpec, LabelFunction, LabelSet, PointCloud

QUAD_TOL = 1e-6
MAX_LEVELS = 12
_GL_X, _GL_W = np.polynomial.legendre.leggauss(32)


def sphere_area(k: int) -> float:
    """Surface measure of the unit sphere S^k in R^(k+1)."""
    return 2.0 * math.pi ** ((k + 1) / 2) / math.gamma((k + 1) / 2)


@dataclass(frozen=True)
class KernelMoments:
    sigma_eta: float
    c_eta: float
    tolerance: float
    dimension: int


def _breaks(kernel: KernelSpec, hi: float, extra=()):
    pts = {0.0, hi, *[p for p in extra if 0.0 < p < hi]}
    if kernel.radius < hi:
        pts.add(kernel.radius)
    return sorted(pts)


def _midpoint_refined(f, edges, tol=QUAD_TOL, max_levels=MAX_LEVELS):
    """Composite midpoint rule on each piece, halving h each level.

    Successive levels are combined by Richardson extrapolation (the midpoint
    error is even in h); refinement stops once two extrapolated values agree
    to the relative ``tol``.
    """
    prev_mid = prev = None
    for level in range(1, max_levels + 1):
        m = 2 ** level
        mid = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            h = (b - a) / m
            mid += h * np.sum(f(a + h * (np.arange(m) + 0.5)))
        if prev_mid is not None:
            total = (4.0 * mid - prev_mid) / 3.0
            if prev is not None and abs(total - prev) <= tol * max(abs(total), 1e-300):
                return total, level
            prev = total
        prev_mid = mid
    raise QuadratureError(f"midpoint refinement did not converge in {max_levels} levels",
                          residual=abs(total - prev))


def kernel_moments(kernel: KernelSpec, d: int, tol: float = QUAD_TOL) -> KernelMoments:
    """sigma_eta = int eta(|x|) x_1^2 dx and C_eta = int_{B(0,2)} eta(|z|) dz.

    Both integrands are radial, so each reduces to a one-dimensional integral
    in r that is refined dyadically with breakpoints at the kernel support.
    """
    R = kernel.radius
    s = sphere_area(d - 1)
    sig, _ = _midpoint_refined(lambda r: kernel.eta(r) * r ** (d + 1), _breaks(kernel, R), tol)
    c, _ = _midpoint_refined(lambda r: kernel.eta(r) * r ** (d - 1), _breaks(kernel, 2.0), tol)
    return KernelMoments(sigma_eta=s / d * sig, c_eta=s * c, tolerance=tol, dimension=d)


def kernel_moments_tensor(kernel: KernelSpec, d: int, axis: int = 0, level: int = 9) -> float:
    """sigma_eta on a tensor midpoint grid over [-R, R]^d, weighting coordinate ``axis``."""
    R = kernel.radius
    m = 2 ** level
    h = 2 * R / m
    c = -R + h * (np.arange(m) + 0.5)
    grids = np.meshgrid(*[c] * d, indexing="ij")
    r = np.sqrt(sum(gr * gr for gr in grids))
    return float(np.sum(kernel.eta(r) * grids[axis] ** 2) * h ** d)


# ---------------------------------------------------------------------------
# boundary coefficients (half-space picture; boundary at z_d = -t)
# ---------------------------------------------------------------------------

def _angle_integral(power_sin, power_cos, upper):
    """int_0^upper sin^a(phi) cos^b(phi) d phi, vectorised in ``upper``."""
    upper = np.asarray(upper, dtype=float)
    phi = 0.5 * upper[..., None] * (_GL_X + 1.0)
    vals = np.sin(phi) ** power_sin * np.cos(phi) ** power_cos
    return 0.5 * upper * np.sum(vals * _GL_W, axis=-1)


class BoundaryCoefficients:
    """sigma_1, sigma_2, gamma and the boundary geometry for one kernel."""

    def __init__(self, kernel: KernelSpec, domain: DomainSpec):
        self.kernel = kernel
        self.domain = domain
        self.d = domain.dimension
        self.moments = kernel_moments(kernel, self.d)

    def _radial(self, t, weight: Callable):
        R = min(self.kernel.radius, 2.0)
        pts = [p for p in (t, self.kernel.radius) if 0 < p < R]
        val, err = integrate.quad(weight, 0.0, R, points=pts or None, epsabs=1e-13,
                                  epsrel=1e-11, limit=200)
        return val

    def _upper(self, t, r):
        return np.arccos(np.clip(-t / np.maximum(r, 1e-300), -1.0, 1.0))

    @functools.lru_cache(maxsize=4096)
    def _sigmas(self, t: float):
        d = self.d
        s = sphere_area(d - 2)
        eta = lambda r: float(self.kernel.eta(r))
        a1 = lambda r: eta(r) * r ** (d + 1) * float(_angle_integral(d, 0, self._upper(t, r)))
        ad = lambda r: eta(r) * r ** (d + 1) * float(_angle_integral(d - 2, 2, self._upper(t, r)))
        g = lambda r: eta(r) * r ** d * float(_angle_integral(d - 2, 1, self._upper(t, r)))
        s1 = s / (d - 1) * self._radial(t, a1)
        sd = s * self._radial(t, ad)
        gam = s * self._radial(t, g)
        return s1, sd - s1, gam

    def sigma1(self, t: float) -> float:
        if t >= 2.0:
            return self.moments.sigma_eta
        return self._sigmas(float(max(t, 0.0)))[0]

    def sigma2(self, t: float) -> float:
        if t >= 2.0:
            return 0.0
        return self._sigmas(float(max(t, 0.0)))[1]

    def gamma_halfspace(self, t: float) -> float:
        """gamma for a flat boundary at distance t (rescaled units)."""
        if t >= 2.0:
            return 0.0
        return self._sigmas(float(max(t, 0.0)))[2]

    def normal(self, x) -> np.ndarray:
        return self.domain.normal(np.atleast_2d(x))[0]

    def dist(self, x) -> float:
        return float(self.domain.boundary_distance(np.atleast_2d(x))[0])

    def gamma_eps(self, x, eps: float) -> float:
        """(1/eps) int_{B(x,2eps) cap Omega} eta_eps(|x-y|) (x-y).n(x) dy on the true domain."""
        x = np.asarray(x, dtype=float)
        if self.dist(x) >= min(2.0, self.kernel.radius) * eps:
            return 0.0
        n = self.normal(x)
        val = _polar_integral(x, self.domain, self.kernel, eps,
                              lambda r, W: -r * (W @ n)[None, :])
        return val / eps


# ---------------------------------------------------------------------------
# quadrature over B(x, R eps) cap Omega in polar coordinates around x
# ---------------------------------------------------------------------------

def _directions(d, level):
    if d == 2:
        m = 8 * 2 ** level
        th = 2 * np.pi * (np.arange(m) + 0.5) / m
        return np.stack([np.cos(th), np.sin(th)], axis=1), np.full(m, 2 * np.pi / m)
    if d == 3:
        m = 4 * 2 ** level
        c = -1.0 + 2.0 * (np.arange(m) + 0.5) / m
        th = 2 * np.pi * (np.arange(2 * m) + 0.5) / (2 * m)
        C, T = np.meshgrid(c, th, indexing="ij")
        S = np.sqrt(1 - C * C)
        W = np.stack([S * np.cos(T), S * np.sin(T), C], axis=-1).reshape(-1, 3)
        return W, np.full(W.shape[0], 4 * np.pi / W.shape[0])
    raise ValueError("quadrature is implemented for d = 2 and d = 3")


def _polar_integral(x, domain: DomainSpec, kernel: KernelSpec, eps: float, f,
                    tol: float = QUAD_TOL, max_levels: int = MAX_LEVELS) -> float:
    """int_Omega eta_eps(|x-y|) f(r, W) dy with y = x + r w, over B(x, R eps).

    ``f(r, W)`` gets radii (k, m) and directions W (m, d) and returns (k, m).
    Along each ray the radius is clipped at the boundary exit and split at
    eps when the support extends past it; each piece uses Gauss-Legendre.
    The angular midpoint rule doubles until the change relative to the
    integral of |integrand| is below ``tol``.
    """
    d = domain.dimension
    R = kernel.cutoff
    prev = None
    for level in range(max_levels):
        W, wa = _directions(d, level)
        rmax = np.minimum(domain.ray_exit(x, W), R)
        pieces = [(np.zeros_like(rmax), rmax)]
        if kernel.radius > 1.0:
            mid = np.minimum(eps, rmax)
            pieces = [(np.zeros_like(rmax), mid), (mid, rmax)]
        total = 0.0
        absum = 0.0
        for a, b in pieces:
            half = 0.5 * (b - a)
            r = a[None, :] + half[None, :] * (_GL_X[:, None] + 1.0)
            wgt = kernel.weight(r, d) * r ** (d - 1) * half[None, :] * _GL_W[:, None]
            contrib = f(r, W) * wgt
            total += float(np.sum(contrib @ wa))
            absum += float(np.sum(np.abs(contrib) @ wa))
        if prev is not None and abs(total - prev) <= tol * max(absum, 1e-300):
            return total
        prev = total
    raise QuadratureError("angular refinement did not converge", residual=abs(total - prev))


def nonlocal_laplacian(phi: LabelFunction, x, kernel: KernelSpec, domain: DomainSpec,
                       rho: Optional[Density] = None, tol: float = QUAD_TOL) -> float:
    """L_eps phi(x) = (2/eps^2) int_Omega eta_eps(|x-y|) (phi(x) - phi(y)) rho(y) dy."""
    x = np.asarray(x, dtype=float)
    rho = rho or Density(domain)
    d = domain.dimension
    phix = float(phi(x))

    def f(r, W):
        flat = (x[None, None, :] + r[:, :, None] * W[None, :, :]).reshape(-1, d)
        return ((phix - phi(flat)) * rho(flat)).reshape(r.shape)

    eps = kernel.epsilon
    return 2.0 / eps ** 2 * _polar_integral(x, domain, kernel, eps, f, tol)


def continuum_laplacian(phi: LabelFunction, x, rho: Density, moments: KernelMoments) -> float:
    """L phi = -(sigma_eta / rho) div(rho^2 grad phi)."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    r = float(rho(X)[0])
    grad_r = rho.grad(X)[0]
    lap = float(np.trace(phi.hess(X)[0]))
    return -moments.sigma_eta * (r * lap + 2.0 * float(grad_r @ phi.grad(X)[0]))


def boundary_corrected_prediction(phi: LabelFunction, x, eps: float,
                                  coeffs: BoundaryCoefficients,
                                  rho: Optional[Density] = None) -> float:
    """sigma_1(t)/sigma_eta L phi + (2 rho gamma_eps / eps) d_n phi
    - (sigma_2(t) / rho) d_n(rho^2 d_n phi), with t = delta_x / eps."""
    rho = rho or Density(coeffs.domain)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    base = continuum_laplacian(phi, X[0], rho, coeffs.moments)
    t = coeffs.dist(X[0]) / eps
    if t >= 2.0:
        return base
    n = coeffs.normal(X[0])
    r = float(rho(X)[0])
    dn_rho = float(rho.grad(X)[0] @ n)
    dn_phi = float(phi.grad(X)[0] @ n)
    nhn = float(n @ phi.hess(X)[0] @ n)
    dn_flux = 2.0 * r * dn_rho * dn_phi + r * r * nhn
    gam = coeffs.gamma_eps(X[0], eps)
    return (coeffs.sigma1(t) / coeffs.moments.sigma_eta * base
            + 2.0 * r * gam / eps * dn_phi
            - coeffs.sigma2(t) / r * dn_flux)


def coefficient_table(coeffs: BoundaryCoefficients, ts) -> np.ndarray:
    return np.array([[t, coeffs.sigma1(t), coeffs.sigma2(t)] for t in ts])


def write_coefficient_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "sigma1", "sigma2"])
        for row in table:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# graph-side quantities
# ---------------------------------------------------------------------------

@dataclass
class GraphStatistics:
    degree: np.ndarray
    prob: np.ndarray
    drift: np.ndarray

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node", "degree", "prob", "drift"])
            for i in range(self.degree.shape[0]):
                w.writerow([i, repr(float(self.degree[i])), repr(float(self.prob[i])),
                            repr(float(self.drift[i]))])


def graph_statistics(graph: SparseGraph, cloud: PointCloud, labels: LabelSet) -> GraphStatistics:
    """d(x) = sum_y w_xy; p(x) sums over labeled y in the label region;
    q(x) sums over y with delta_y <= delta_x - eps/2."""
    A = graph.to_scipy()
    mask = labels.mask(graph.n)
    if labels.spec is not None:
        mask &= labels.spec.region(cloud)
    prob = A @ mask.astype(float)
    delta = cloud.domain.boundary_distance(cloud.points)
    rows = np.repeat(np.arange(graph.n), np.diff(graph.indptr))
    keep = delta[graph.indices] <= delta[rows] - graph.epsilon / 2.0
    drift = np.bincount(rows[keep], weights=graph.data[keep], minlength=graph.n)
    return GraphStatistics(graph.degrees.copy(), prob, drift)


def graph_laplacian_at(cloud: PointCloud, kernel: KernelSpec, values, rows,
                       factor: float = 2.0, index: Optional[GridIndex] = None):
    """(factor / (n eps^2)) sum_j w_ij (v_i - v_j) at the chosen rows, matrix-free.

    ``factor`` 2 matches the normalisation of the nonlocal operator L_eps.
    Returns (values, degrees) at the rows.
    """
    index = index or GridIndex(cloud.points, kernel.cutoff)
    lap, _, deg = index.row_reductions(rows, values, kernel)
    return factor * lap / (cloud.n * kernel.epsilon ** 2), deg


def n_for_scale(eps: float, d: int, ref_n: int, ref_eps: float) -> int:
    """Smallest n with n eps^(d+2) / log n at least the reference value."""
    target = ref_n * ref_eps ** (d + 2) / math.log(ref_n)
    n = max(2, int(target * math.log(max(target, 3.0)) / eps ** (d + 2)))
    while n * eps ** (d + 2) / math.log(n) < target:
        n = int(n * 1.01) + 1
    while n > 2 and (n - 1) * eps ** (d + 2) / math.log(n - 1) >= target:
        n -= 1
    return n


def interior_consistency(phi: LabelFunction, domain: DomainSpec, eps: float, n: int,
                         samples: int, seed: int, kernel_kind: str = "gaussian",
                         trials: int = 1, min_dist: Optional[float] = None) -> float:
    """Mean over trials of the sup over ``samples`` random nodes with
    delta_x >= ``min_dist`` (default: the kernel cutoff) of |graph operator - L phi|.

    Holding ``min_dist`` fixed across scales compares sups over the same region.
    """
    from .sampling import sample_points

    kernel = KernelSpec(kernel_kind, eps)
    moments = kernel_moments(kernel, domain.dimension)
    min_dist = kernel.cutoff if min_dist is None else max(min_dist, kernel.cutoff)
    sups = []
    for t in range(trials):
        ss = np.random.SeedSequence([seed, n, t])
        cloud = sample_points(domain, n, int(ss.generate_state(1)[0]))
        rng = np.random.default_rng(ss.spawn(1)[0])
        inner = np.flatnonzero(domain.boundary_distance(cloud.points) >= min_dist)
        rows = np.sort(rng.choice(inner, size=min(samples, inner.size), replace=False))
        est, _ = graph_laplacian_at(cloud, kernel, phi(cloud.points), rows)
        rho = cloud.rho
        exact = np.array([continuum_laplacian(phi, cloud.points[i], rho, moments) for i in rows])
        sups.append(float(np.max(np.abs(est - exact))))
    return float(np.mean(sups))


@dataclass
class BoundaryComparison:
    rows: np.ndarray
    graph_value: np.ndarray
    uncorrected: np.ndarray
    corrected: np.ndarray

    @property
    def improvement(self) -> float:
        a = np.median(np.abs(self.graph_value - self.uncorrected))
        b = np.median(np.abs(self.graph_value - self.corrected))
        return float(a / b) if b > 0 else math.inf


def boundary_consistency(phi: LabelFunction, domain: DomainSpec, eps: float, n: int,
                         samples: int, seed: int, kernel_kind: str = "gaussian") -> BoundaryComparison:
    """Graph operator at random nodes within 2 eps of the boundary, against the
    plain continuum operator and the boundary-corrected prediction."""
    from .sampling import sample_points

    kernel = KernelSpec(kernel_kind, eps)
    coeffs = BoundaryCoefficients(kernel, domain)
    ss = np.random.SeedSequence([seed, n])
    cloud = sample_points(domain, n, int(ss.generate_state(1)[0]))
    rng = np.random.default_rng(ss.spawn(1)[0])
    near = np.flatnonzero(domain.boundary_distance(cloud.points) < 2.0 * eps)
    rows = np.sort(rng.choice(near, size=min(samples, near.size), replace=False))
    est, _ = graph_laplacian_at(cloud, kernel, phi(cloud.points), rows)
    rho = cloud.rho
    plain = np.array([continuum_laplacian(phi, cloud.points[i], rho, coeffs.moments) for i in rows])
    corr = np.array([boundary_corrected_prediction(phi, cloud.points[i], eps, coeffs, rho)
                     for i in rows])
    return BoundaryComparison(rows, est, plain, corr)
