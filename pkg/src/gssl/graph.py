"""Weighted epsilon-graphs and kNN graphs in CSR form."""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc

from . import _kernels as K
from .sampling import PointCloud

GRAPH_MAGIC = b"GSSL"
GRAPH_VERSION = 1
_CHUNK = 1 << 22


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Kernel profile eta and scale epsilon; eta_eps(r) = eps^-d eta(r / eps).

    ``gaussian`` has standard deviation eps/2, i.e. eta(t) = exp(-2 t^2), cut
    at t = 2.  ``indicator`` is eta = 1 on [0, 1].  ``custom`` takes a
    vectorised ``profile`` and its ``support`` radius.
    """

    kind: str
    epsilon: float
    profile: Optional[Callable] = None
    support: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.kind == "custom":
            if self.profile is None or not (self.support and self.support > 0):
                raise ValueError("custom kernel needs a profile and a positive support")
            if not float(np.asarray(self.profile(np.zeros(1)))[0]) > 0:
                raise ValueError("eta(0) must be positive")
        elif self.kind not in ("gaussian", "indicator"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")

    @property
    def radius(self) -> float:
        """Support of eta in rescaled units."""
        if self.kind == "gaussian":
            return 2.0
        if self.kind == "indicator":
            return 1.0
        return float(self.support)

    @property
    def cutoff(self) -> float:
        return self.radius * self.epsilon

    def eta(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        inside = t <= self.radius
        if self.kind == "gaussian":
            return np.where(inside, np.exp(-2.0 * t * t), 0.0)
        if self.kind == "indicator":
            return inside.astype(float)
        return np.where(inside, np.asarray(self.profile(np.minimum(t, self.radius)), dtype=float), 0.0)

    def weight(self, r, d: int) -> np.ndarray:
        return self.eta(np.asarray(r, dtype=float) / self.epsilon) / self.epsilon ** d

    def to_dict(self) -> dict:
        if self.kind == "custom":
            return {"kind": "custom", "epsilon": self.epsilon, "support": self.support}
        return {"kind": self.kind, "epsilon": self.epsilon}


def eps_scale(n: int, d: int) -> float:
    """Lowest scale covered by pointwise consistency: (log n / n)^(1/(d+2))."""
    return (math.log(n) / n) ** (1.0 / (d + 2))


@dataclass(frozen=True, eq=False)
class SparseGraph:
    n: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    degrees: np.ndarray
    kernel: Optional[KernelSpec] = None
    construction: str = "epsilon"
    k: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def nnz(self) -> int:
        return int(self.data.shape[0])

    @property
    def epsilon(self) -> Optional[float]:
        return None if self.kernel is None else self.kernel.epsilon

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def scaled(self, c: float) -> "SparseGraph":
        return _make_graph(self.n, self.indptr, self.indices, self.data * c,
                           self.kernel, self.construction, self.k)

    def self_weights(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def edges(self):
        """Upper-triangular edge list (i < j) as three arrays."""
        rows = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))
        keep = rows < self.indices
        return rows[keep], self.indices[keep].astype(np.int64), self.data[keep]


def _make_graph(n, indptr, indices, data, kernel, construction, k=None) -> SparseGraph:
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int32)
    data = np.ascontiguousarray(data, dtype=np.float64)
    deg = K.row_sums(indptr, data)
    return SparseGraph(n=int(n), indptr=indptr, indices=indices, data=data, degrees=deg,
                       kernel=kernel, construction=construction, k=k)


def from_scipy(A, kernel: Optional[KernelSpec] = None, construction: str = "custom",
               k: Optional[int] = None) -> SparseGraph:
    """Wrap a symmetric nonnegative sparse matrix; explicit zeros are dropped."""
    A = sp.csr_matrix(A, dtype=float, copy=True)
    if A.shape[0] != A.shape[1]:
        raise ValueError("adjacency must be square")
    if A.nnz and A.data.min() < 0:
        raise ValueError("weights must be nonnegative")
    A.eliminate_zeros()
    A.sum_duplicates()
    A.sort_indices()
    if (A != A.T).nnz:
        raise ValueError("adjacency must be symmetric")
    return _make_graph(A.shape[0], A.indptr, A.indices, A.data, kernel, construction, k)


def from_dense(W, **kw) -> SparseGraph:
    return from_scipy(sp.csr_matrix(np.asarray(W, dtype=float)), **kw)


# ---------------------------------------------------------------------------
# grid index
# ---------------------------------------------------------------------------

class GridIndex:
    """Uniform grid with cell side equal to the search radius."""

    def __init__(self, X, radius: float):
        X = np.ascontiguousarray(X, dtype=np.float64)
        self.X = X
        self.radius = float(radius)
        n, d = X.shape
        lo = X.min(axis=0) if n else np.zeros(d)
        coords = np.floor((X - lo) / self.radius).astype(np.int64)
        dims = coords.max(axis=0) + 1 if n else np.ones(d, dtype=np.int64)
        strides = np.ones(d, dtype=np.int64)
        for k in range(d - 2, -1, -1):
            strides[k] = strides[k + 1] * dims[k + 1]
        keys = coords @ strides
        order = np.argsort(keys, kind="stable")
        skeys = keys[order]
        cell_ids, first = np.unique(skeys, return_index=True)
        self.coords = coords
        self.dims = dims.astype(np.int64)
        self.strides = strides
        self.order = order.astype(np.int64)
        self.cell_ids = cell_ids.astype(np.int64)
        self.cell_start = np.append(first, n).astype(np.int64)
        self.offsets = np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=np.int64)

    def _args(self):
        return (self.X, self.coords, self.dims, self.strides, self.offsets, self.cell_ids,
                self.cell_start, self.order, self.radius ** 2)

    def csr_squared_distances(self):
        """CSR pattern of all pairs within the radius (self included), with
        squared distances as data and column indices sorted per row."""
        counts = K.grid_count(*self._args())
        indptr = np.zeros(self.X.shape[0] + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        nnz = int(indptr[-1])
        indices = np.empty(nnz, dtype=np.int32)
        data = np.empty(nnz, dtype=np.float64)
        K.grid_fill(*self._args(), indptr, indices, data)
        return indptr, indices, data

    def row_reductions(self, rows, u, kernel: KernelSpec, p: float = 2.0):
        if kernel.kind not in ("indicator", "gaussian"):
            raise ValueError("matrix-free reductions support indicator and gaussian kernels")
        d = self.X.shape[1]
        eps = kernel.epsilon
        return K.grid_rows(*self._args(), np.ascontiguousarray(rows, dtype=np.int64),
                           np.ascontiguousarray(u, dtype=np.float64), float(p), 1.0 / eps,
                           eps ** -d, 0 if kernel.kind == "indicator" else 1)


def estimate_nnz(n: int, d: int, radius: float, domain_volume: float) -> float:
    ball = math.pi ** (d / 2) / math.gamma(d / 2 + 1) * radius ** d
    return n * (1.0 + n * min(ball / domain_volume, 1.0))


def build_eps_graph(cloud: PointCloud, kernel: KernelSpec) -> SparseGraph:
    """w_ij = eta_eps(|x_i - x_j|) for pairs within the kernel support."""
    X = cloud.points
    d = X.shape[1]
    eps = kernel.epsilon
    indptr, indices, data = GridIndex(X, kernel.cutoff).csr_squared_distances()
    scale = eps ** -d
    for a in range(0, data.shape[0], _CHUNK):
        blk = data[a:a + _CHUNK]
        if kernel.kind == "gaussian":
            np.multiply(blk, -2.0 / (eps * eps), out=blk)
            np.exp(blk, out=blk)
            np.multiply(blk, scale, out=blk)
        elif kernel.kind == "indicator":
            blk.fill(scale)
        else:
            blk[:] = scale * kernel.eta(np.sqrt(blk) / eps)
    if kernel.kind == "custom" and np.any(data == 0):
        A = sp.csr_matrix((data, indices, indptr), shape=(cloud.n, cloud.n))
        A.eliminate_zeros()
        indptr, indices, data = A.indptr, A.indices, A.data
    return _make_graph(cloud.n, indptr, indices, data, kernel, "epsilon")


def _knn_rows(X, k, chunk):
    """Indices and distances of the k nearest other points, ties to lower index."""
    n = X.shape[0]
    sq = np.einsum("ij,ij->i", X, X)
    nbr = np.empty((n, k), dtype=np.int64)
    dist2 = np.empty((n, k), dtype=np.float64)
    for a in range(0, n, chunk):
        b = min(n, a + chunk)
        D = sq[a:b, None] + sq[None, :] - 2.0 * (X[a:b] @ X.T)
        np.maximum(D, 0.0, out=D)
        D[np.arange(b - a), np.arange(a, b)] = np.inf
        kth = np.partition(D, k - 1, axis=1)[:, k - 1]
        for r in range(b - a):
            cand = np.flatnonzero(D[r] <= kth[r])
            sel = cand[np.lexsort((cand, D[r, cand]))[:k]]
            nbr[a + r] = sel
            dist2[a + r] = D[r, sel]
    return nbr, dist2


def build_knn_graph(cloud, k: int, chunk: int = 1024) -> SparseGraph:
    """Symmetrised kNN graph with Gaussian weights exp(-4|x_i - x_j|^2 / d_k(x_i)^2).

    The point itself is not counted among its k neighbours but keeps the
    self-weight exp(0) = 1.  Accepts a PointCloud or a raw (n, d) array.
    """
    X = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k < n:
        raise ValueError("k must satisfy 1 <= k < n")
    nbr, dist2 = _knn_rows(X, k, chunk)
    dk2 = dist2[:, -1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.exp(-4.0 * dist2 / dk2)
    w[dist2 == 0.0] = 1.0
    rows = np.repeat(np.arange(n), k)
    W = sp.csr_matrix((w.ravel(), (rows, nbr.ravel())), shape=(n, n))
    W = W + sp.identity(n, format="csr")
    W = (W + W.T) * 0.5
    W.sort_indices()
    g = from_scipy(W, construction="knn", k=k)
    return g


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def _check_vector(graph, u):
    u = np.ascontiguousarray(u, dtype=np.float64)
    if u.shape != (graph.n,):
        raise ValueError(f"vector length {u.shape} does not match graph size {graph.n}")
    return u


def laplacian_apply(graph: SparseGraph, u, scaling: str = "unnormalized",
                    n: Optional[int] = None, eps: Optional[float] = None) -> np.ndarray:
    """(L u)_i = sum_j w_ij (u_i - u_j); ``calibrated`` divides by n eps^2."""
    u = _check_vector(graph, u)
    out = K.laplacian_rows(graph.indptr, graph.indices, graph.data, u)
    if scaling == "unnormalized":
        return out
    if scaling == "calibrated":
        n = graph.n if n is None else n
        eps = graph.epsilon if eps is None else eps
        return out / (n * eps * eps)
    raise ValueError(f"unknown scaling {scaling!r}")


def dirichlet_energy(graph: SparseGraph, u, p: float = 2.0, n: Optional[int] = None,
                     eps: Optional[float] = None) -> float:
    """(1 / (n^2 eps^p)) sum over ordered pairs of w_ij |u_i - u_j|^p."""
    if p < 1:
        raise ValueError("p must be >= 1")
    u = _check_vector(graph, u)
    n = graph.n if n is None else n
    eps = (graph.epsilon or 1.0) if eps is None else eps
    rows = K.row_energy(graph.indptr, graph.indices, graph.data, u, float(p))
    return float(np.sum(rows) / (n * n * eps ** p))


def dirichlet_energy_streaming(cloud: PointCloud, kernel: KernelSpec, u, p: float = 2.0,
                               block: int = 1 << 16) -> float:
    """Same value as ``dirichlet_energy`` on the epsilon-graph, without storing it."""
    u = np.ascontiguousarray(u, dtype=np.float64)
    n = cloud.n
    index = GridIndex(cloud.points, kernel.cutoff)
    parts = []
    for a in range(0, n, block):
        rows = np.arange(a, min(n, a + block), dtype=np.int64)
        parts.append(index.row_reductions(rows, u, kernel, p)[1])
    total = np.sum(np.concatenate(parts))
    return float(total / (n * n * kernel.epsilon ** p))


def connected_components(graph: SparseGraph) -> np.ndarray:
    _, labels = _cc(graph.to_scipy(), directed=False)
    return labels.astype(np.int64)


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def save_graph(path, graph: SparseGraph):
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<IQQ", GRAPH_VERSION, graph.n, graph.nnz))
        fh.write(graph.indptr.astype("<u8").tobytes())
        fh.write(graph.indices.astype("<u4").tobytes())
        fh.write(graph.data.astype("<f8").tobytes())


def load_graph(path) -> SparseGraph:
    from .errors import DataError

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != GRAPH_MAGIC:
        raise DataError("not a GSSL graph file")
    version, n, nnz = struct.unpack_from("<IQQ", raw, 4)
    if version != GRAPH_VERSION:
        raise DataError(f"unsupported graph file version {version}")
    off = 4 + struct.calcsize("<IQQ")
    need = off + 8 * (n + 1) + 4 * nnz + 8 * nnz
    if len(raw) != need:
        raise DataError("graph file truncated or oversized")
    indptr = np.frombuffer(raw, "<u8", n + 1, off).astype(np.int64)
    off += 8 * (n + 1)
    indices = np.frombuffer(raw, "<u4", nnz, off).astype(np.int32)
    off += 4 * nnz
    data = np.frombuffer(raw, "<f8", nnz, off).astype(np.float64)
    return _make_graph(n, indptr, indices, data, None, "loaded")


def write_edge_csv(path, graph: SparseGraph):
    i, j, w = graph.edges()
    with open(path, "w") as fh:
        fh.write("i,j,w\n")
        for a, b, c in zip(i.tolist(), j.tolist(), w.tolist()):
            fh.write(f"{a},{b},{c!r}\n")
