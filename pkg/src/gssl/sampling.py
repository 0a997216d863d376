"""Point clouds, label models and the closed-form label functions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DataError

SUPPORTED_DOMAINS = ("unit-ball", "unit-cube")
CLAMP_RADIUS = 0.05
SOURCE = 1.0 / 8.0


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    dimension: int

    def __post_init__(self):
        if self.kind not in SUPPORTED_DOMAINS:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if int(self.dimension) != self.dimension or self.dimension < 2:
            raise ValueError("domain dimension must be an integer >= 2")

    @property
    def volume(self) -> float:
        if self.kind == "unit-cube":
            return 1.0
        d = self.dimension
        return math.pi ** (d / 2) / math.gamma(d / 2 + 1)

    @property
    def center(self) -> np.ndarray:
        c = 0.0 if self.kind == "unit-ball" else 0.5
        return np.full(self.dimension, c)

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.kind == "unit-ball":
            return np.einsum("ij,ij->i", X, X) < 1.0
        return np.all((X >= 0.0) & (X <= 1.0), axis=1)

    def boundary_distance(self, X) -> np.ndarray:
        """Distance to the boundary for points inside the domain."""
        X = np.atleast_2d(X)
        if self.kind == "unit-ball":
            return 1.0 - np.linalg.norm(X, axis=1)
        return np.minimum(X, 1.0 - X).min(axis=1)

    def normal(self, X) -> np.ndarray:
        """Outward unit normal extended into the domain.

        Radial for the ball; for the cube, the normal of the nearest face.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "unit-ball":
            r = np.linalg.norm(X, axis=1, keepdims=True)
            out = np.zeros_like(X)
            out[:, 0] = 1.0
            np.divide(X, r, out=out, where=r > 0)
            return out
        dist = np.concatenate([X, 1.0 - X], axis=1)
        face = np.argmin(dist, axis=1)
        out = np.zeros_like(X)
        d = X.shape[1]
        rows = np.arange(X.shape[0])
        out[rows, face % d] = np.where(face < d, -1.0, 1.0)
        return out

    def ray_exit(self, x, directions) -> np.ndarray:
        """Distance from interior point x along unit directions to the boundary."""
        x = np.asarray(x, dtype=float)
        U = np.atleast_2d(directions)
        if self.kind == "unit-ball":
            b = U @ x
            c = x @ x - 1.0
            return -b + np.sqrt(np.maximum(b * b - c, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            hi = np.where(U > 0, (1.0 - x) / U, np.inf)
            lo = np.where(U < 0, -x / U, np.inf)
        return np.minimum(hi, lo).min(axis=1)


@dataclass(frozen=True)
class Density:
    """Sampling density; only the uniform law on the domain is implemented."""

    domain: DomainSpec
    kind: str = "uniform"

    def __post_init__(self):
        if self.kind != "uniform":
            raise ValueError("only uniform densities are supported")

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.full(X.shape[0], 1.0 / self.domain.volume)

    def grad(self, X) -> np.ndarray:
        return np.zeros_like(np.atleast_2d(np.asarray(X, dtype=float)))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    domain: DomainSpec
    density: str = "uniform"
    seed: int = 0

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def rho(self) -> Density:
        return Density(self.domain, self.density)


def sample_points(domain: DomainSpec, n: int, seed: int) -> PointCloud:
    """Draw n i.i.d. uniform points in the domain.

    Ball samples use a normalised Gaussian direction scaled by U**(1/d).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    d = domain.dimension
    if domain.kind == "unit-cube":
        X = rng.random((n, d))
    else:
        G = rng.standard_normal((n, d))
        norms = np.linalg.norm(G, axis=1)
        while np.any(norms == 0.0):
            bad = norms == 0.0
            G[bad] = rng.standard_normal((int(bad.sum()), d))
            norms = np.linalg.norm(G, axis=1)
        R = rng.random(n) ** (1.0 / d)
        X = G * (R / norms)[:, None]
    X.setflags(write=False)
    return PointCloud(points=X, domain=domain, seed=int(seed))


# ---------------------------------------------------------------------------
# label functions
# ---------------------------------------------------------------------------

class LabelFunction:
    """Vectorised evaluator x -> g(x) with optional analytic derivatives.

    Derivatives fall back to central differences with step 1e-4.
    """

    fd_step = 1e-4

    def __init__(self, fn: Callable, name: str = "g", grad: Optional[Callable] = None,
                 hess: Optional[Callable] = None, singular_points=None):
        self._fn = fn
        self.name = name
        self._grad = grad
        self._hess = hess
        self.singular_points = (np.zeros((0, 0)) if singular_points is None
                                else np.atleast_2d(singular_points))

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return float(self._fn(X[None, :])[0])
        return self._fn(X)

    def __repr__(self):
        return f"LabelFunction({self.name})"

    def grad(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._grad is not None:
            return self._grad(X)
        h = self.fd_step
        out = np.empty_like(X)
        for k in range(X.shape[1]):
            E = np.zeros_like(X)
            E[:, k] = h
            out[:, k] = (self._fn(X + E) - self._fn(X - E)) / (2 * h)
        return out

    def hess(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._hess is not None:
            return self._hess(X)
        h = self.fd_step
        m, d = X.shape
        out = np.empty((m, d, d))
        f0 = self._fn(X)
        for a in range(d):
            Ea = np.zeros_like(X)
            Ea[:, a] = h
            out[:, a, a] = (self._fn(X + Ea) - 2 * f0 + self._fn(X - Ea)) / h**2
            for b in range(a + 1, d):
                Eb = np.zeros_like(X)
                Eb[:, b] = h
                v = (self._fn(X + Ea + Eb) - self._fn(X + Ea - Eb)
                     - self._fn(X - Ea + Eb) + self._fn(X - Ea - Eb)) / (4 * h * h)
                out[:, a, b] = v
                out[:, b, a] = v
        return out


def _clamp(X, centers, radius):
    X = np.array(X, dtype=float, copy=True)
    for s in centers:
        diff = X - s
        r = np.linalg.norm(diff, axis=1)
        inside = r < radius
        if not np.any(inside):
            continue
        dirs = np.zeros_like(diff[inside])
        dirs[:, 0] = 1.0
        ri = r[inside]
        nz = ri > 0
        dirs[nz] = diff[inside][nz] / ri[nz, None]
        X[inside] = s + radius * dirs
    return X


def _model1_2d(X):
    z = np.array([SOURCE, 0.0])
    zs = z / (z @ z)
    nz = np.linalg.norm(z)
    return (np.log(np.linalg.norm(X - zs, axis=1) * nz)
            - np.log(np.linalg.norm(X + zs, axis=1) * nz)
            + np.log(np.linalg.norm(X - z, axis=1))
            - np.log(np.linalg.norm(X + z, axis=1)))


def _model1_3d(X):
    z = np.array([SOURCE, 0.0, 0.0])
    zs = z / (z @ z)
    nz = np.linalg.norm(z)
    zhat = z / nz
    a = zs - X
    b = zs + X
    la = np.linalg.norm(a, axis=1)
    lb = np.linalg.norm(b, axis=1)
    return (1.0 / (nz * la) - 1.0 / (nz * lb)
            + 1.0 / np.linalg.norm(X - z, axis=1) - 1.0 / np.linalg.norm(X + z, axis=1)
            + np.log(a @ zhat + la) - np.log(b @ zhat + lb))


def _model2_coefficients(d):
    signs = np.array([(-1.0) ** i for i in range(d)])
    c = ((-1.0) ** (d - 1) + 1.0) / (2.0 * d)
    return signs - c


def label_function(model: str, dimension: int) -> LabelFunction:
    """Closed-form label functions for the synthetic experiments.

    ``model1`` (d = 2, 3) is the Neumann two-source solution with sources at
    +-(1/8, 0, ...), clamped to its values on spheres of radius 0.05 around
    the sources and their images.  ``model2`` is the harmonic quadratic.
    """
    d = int(dimension)
    if model == "model2" and d >= 2:
        a = _model2_coefficients(d)
        return LabelFunction(
            lambda X: (X * X) @ a,
            name=f"model2-d{d}",
            grad=lambda X: 2.0 * X * a,
            hess=lambda X: np.broadcast_to(np.diag(2.0 * a), (X.shape[0], d, d)).copy(),
        )
    if model == "model1" and d in (2, 3):
        z = np.zeros(d)
        z[0] = SOURCE
        zs = z / (z @ z)
        centers = np.array([z, -z, zs, -zs])
        raw = _model1_2d if d == 2 else _model1_3d
        return LabelFunction(lambda X: raw(_clamp(X, centers, CLAMP_RADIUS)),
                             name=f"model1-d{d}", singular_points=centers)
    raise ValueError(f"no label function for model={model!r}, dimension={dimension}")


def coordinate_function(axis: int = 0) -> LabelFunction:
    """g(x) = x[axis]."""
    def grad(X):
        G = np.zeros_like(X)
        G[:, axis] = 1.0
        return G

    return LabelFunction(lambda X: X[:, axis].copy(), name=f"x{axis + 1}", grad=grad,
                         hess=lambda X: np.zeros((X.shape[0], X.shape[1], X.shape[1])))


def cosine_function() -> LabelFunction:
    """g(x) = cos(x . e1), the spike demonstration label."""
    def grad(X):
        G = np.zeros_like(X)
        G[:, 0] = -np.sin(X[:, 0])
        return G

    def hess(X):
        H = np.zeros((X.shape[0], X.shape[1], X.shape[1]))
        H[:, 0, 0] = -np.cos(X[:, 0])
        return H

    return LabelFunction(lambda X: np.cos(X[:, 0]), name="cos-x1", grad=grad, hess=hess)


def constant_function(c: float) -> LabelFunction:
    return LabelFunction(lambda X: np.full(X.shape[0], float(c)), name=f"const{c:g}",
                         grad=lambda X: np.zeros_like(X),
                         hess=lambda X: np.zeros((X.shape[0], X.shape[1], X.shape[1])))


def continuum_laplacian_residual(g: LabelFunction, x, h: float) -> float:
    """Second-order central-difference Laplacian of g at x."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    E = np.eye(d) * h
    pts = np.vstack([x[None, :], x + E, x - E])
    v = g(pts)
    return float((v[1:d + 1].sum() + v[d + 1:].sum() - 2 * d * v[0]) / (h * h))


# ---------------------------------------------------------------------------
# label models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelModelSpec:
    """``subset``: ball of ``radius`` around the domain centre (Model 1).
    ``boundary-band``: points closer than ``delta`` to the boundary (Model 2).
    """

    model: str
    beta: float
    radius: float = 0.5
    delta: Optional[float] = None

    def __post_init__(self):
        if self.model not in ("subset", "boundary-band"):
            raise ValueError(f"unknown label model {self.model!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.model == "subset" and not self.radius > 0:
            raise ValueError("subset radius must be positive")
        if self.model == "boundary-band" and not (self.delta is not None and self.delta > 0):
            raise ValueError("boundary-band model needs delta > 0")

    def check_domain(self, domain: DomainSpec):
        if self.model == "subset":
            limit = 1.0 if domain.kind == "unit-ball" else 0.5
            if self.radius >= limit:
                raise ValueError("label subset must be strictly inside the domain")

    def check_scale(self, eps: float):
        if self.model == "boundary-band" and self.delta > eps:
            raise ValueError(f"delta={self.delta} exceeds the graph scale eps={eps}")

    def region(self, cloud: PointCloud) -> np.ndarray:
        X = cloud.points
        if self.model == "subset":
            return np.linalg.norm(X - cloud.domain.center, axis=1) < self.radius
        return cloud.domain.boundary_distance(X) < self.delta

    def region_volume(self, domain: DomainSpec) -> float:
        d = domain.dimension
        unit = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
        if self.model == "subset":
            return unit * self.radius ** d
        if domain.kind == "unit-ball":
            return unit * (1.0 - max(0.0, 1.0 - self.delta) ** d)
        return 1.0 - max(0.0, 1.0 - 2 * self.delta) ** d


@dataclass(frozen=True, eq=False)
class LabelSet:
    indices: np.ndarray
    values: np.ndarray
    spec: Optional[LabelModelSpec] = None
    n: Optional[int] = field(default=None)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        if idx.shape != vals.shape:
            raise DataError("label indices and values differ in length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            order = np.argsort(idx, kind="stable")
            idx, vals = idx[order], vals[order]
            if np.any(np.diff(idx) == 0) or idx[0] < 0:
                raise DataError("label indices must be unique and non-negative")
        if self.n is not None and idx.size and idx[-1] >= self.n:
            raise DataError("label index out of range")
        if not np.all(np.isfinite(vals)):
            raise DataError("label values must be finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return int(self.indices.size)

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.indices] = True
        return m

    def dense(self, n: int, fill: float = 0.0) -> np.ndarray:
        out = np.full(n, fill, dtype=float)
        out[self.indices] = self.values
        return out


def select_labels(cloud: PointCloud, spec: LabelModelSpec, g: LabelFunction,
                  seed: int) -> LabelSet:
    """Each point of the label region joins the training set with prob. beta."""
    spec.check_domain(cloud.domain)
    rng = np.random.default_rng(seed)
    draw = rng.random(cloud.n) < spec.beta
    idx = np.flatnonzero(spec.region(cloud) & draw)
    values = g(cloud.points[idx]) if idx.size else np.zeros(0)
    return LabelSet(indices=idx, values=values, spec=spec, n=cloud.n)


def labels_from_indices(cloud: PointCloud, indices, g: LabelFunction) -> LabelSet:
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    return LabelSet(indices=idx, values=g(cloud.points[idx]) if idx.size else np.zeros(0),
                    n=cloud.n)


# ---------------------------------------------------------------------------
# CSV replay format
# ---------------------------------------------------------------------------

def write_cloud_csv(path, cloud: PointCloud, labels: Optional[LabelSet] = None):
    d = cloud.dimension
    lab = np.zeros(cloud.n, dtype=bool)
    vals = np.zeros(cloud.n)
    if labels is not None:
        lab[labels.indices] = True
        vals[labels.indices] = labels.values
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(d)] + ["labeled", "label_value"])
        for i in range(cloud.n):
            row = [repr(float(v)) for v in cloud.points[i]]
            row += ["1" if lab[i] else "0", repr(float(vals[i])) if lab[i] else ""]
            w.writerow(row)


def read_cloud_csv(path, domain: DomainSpec, seed: int = 0):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 2
    X = np.array([[float(v) for v in r[:d]] for r in body]).reshape(-1, d)
    lab = np.array([r[d] == "1" for r in body], dtype=bool)
    vals = np.array([float(r[d + 1]) for r, f in zip(body, lab) if f])
    X.setflags(write=False)
    cloud = PointCloud(points=X, domain=domain, seed=seed)
    return cloud, LabelSet(indices=np.flatnonzero(lab), values=vals, n=cloud.n)
