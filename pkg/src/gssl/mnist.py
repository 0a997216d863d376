"""IDX reading/writing, an opt-in MNIST fetch, and the one-vs-rest kNN pipeline."""
from __future__ import annotations

import dataclasses
import gzip
import hashlib
import os
import shutil
import struct
import urllib.request
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, IDXError, MissingDataError
from .experiments import RateFit, fit_power_law_xy
from .graph import build_knn_graph
from .solvers import solve_hard_multi

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
DATA_ENV = "GSSL_DATA_DIR"


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes (gzip allowed)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IDXError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise IDXError(f"{path}: unsupported IDX type 0x{magic:08x}")
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise IDXError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:hdr])
    count = 1
    for d in dims:
        count *= d
        if count > 1 << 40:
            raise IDXError(f"{path}: dimension overflow {dims}")
    if len(raw) - hdr != count:
        raise IDXError(f"{path}: payload has {len(raw) - hdr} bytes, header says {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims).copy()


def write_idx(path, array) -> None:
    a = np.asarray(array)
    if a.dtype != np.uint8 or a.ndim not in (1, 3):
        raise ValueError("write_idx supports 1-D or 3-D uint8 arrays")
    magic = IDX_LABELS if a.ndim == 1 else IDX_IMAGES
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">I" + "I" * a.ndim, magic, *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def _find(data_dir, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = os.path.join(data_dir, name)
        if os.path.exists(p):
            return p
    return None


def default_data_dir() -> str:
    return os.environ.get(DATA_ENV, os.path.join(os.getcwd(), "data", "mnist"))


def fetch_mnist(url: str, data_dir: str, checksums: Optional[dict] = None) -> list:
    """Download the four gzip archives from ``url`` (a directory URL) and check
    SHA-256 digests when ``checksums`` maps file names to hex digests."""
    os.makedirs(data_dir, exist_ok=True)
    checksums = checksums or {}
    got = []
    for stem in FILES.values():
        name = stem + ".gz"
        dest = os.path.join(data_dir, name)
        try:
            with urllib.request.urlopen(url.rstrip("/") + "/" + name) as resp, \
                    open(dest + ".part", "wb") as out:
                shutil.copyfileobj(resp, out)
        except OSError as exc:
            raise MissingDataError(f"missing IDX: download of {name} failed: {exc}") from exc
        digest = hashlib.sha256(open(dest + ".part", "rb").read()).hexdigest()
        want = checksums.get(name) or checksums.get(stem)
        if want and digest != want.lower():
            os.remove(dest + ".part")
            raise IDXError(f"checksum mismatch for {name}: {digest}")
        os.replace(dest + ".part", dest)
        got.append(dest)
    return got


def load_mnist(data_dir: str):
    """All 70 000 images as (n, 784) uint8 plus labels, train then test."""
    paths = {k: _find(data_dir, v) for k, v in FILES.items()}
    missing = [FILES[k] for k, p in paths.items() if p is None]
    if missing:
        raise MissingDataError(f"missing IDX files in {data_dir}: {', '.join(missing)}")
    X = np.concatenate([load_idx(paths["train_images"]), load_idx(paths["test_images"])])
    y = np.concatenate([load_idx(paths["train_labels"]), load_idx(paths["test_labels"])])
    if X.shape[0] != y.shape[0]:
        raise IDXError("image and label counts differ")
    return X.reshape(X.shape[0], -1), y


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MnistRecord:
    m: int
    trial: int
    test_error: float
    train_error: float
    labeled: int
    iterations: int


@dataclass
class MnistResult:
    k: int
    n: int
    records: list
    fit: Optional[RateFit]

    def summary(self):
        out = []
        for m in sorted({r.m for r in self.records}):
            rs = [r for r in self.records if r.m == m]
            errs = [r.test_error for r in rs if not np.isnan(r.test_error)]
            out.append({"m": m, "mean_error": float(np.mean(errs)) if errs else float("nan"),
                        "trials": len(rs)})
        return out

    def to_dict(self):
        return {"k": self.k, "n": self.n, "summary": self.summary(),
                "fit": None if self.fit is None else self.fit.to_dict()}


def choose_labels(y, m: int, rng, classes=range(10)) -> np.ndarray:
    picks = []
    for c in classes:
        members = np.flatnonzero(y == c)
        if members.size == 0:
            raise DataError(f"class {c} absent from the data")
        if m > members.size:
            raise DataError(f"m={m} exceeds the {members.size} points of class {c}")
        picks.append(rng.choice(members, size=m, replace=False))
    return np.sort(np.concatenate(picks))


def one_vs_rest(graph, y, idx, classes=range(10)):
    """Scores of the one-hot Laplace problems and argmax predictions (ties to the lower class)."""
    classes = list(classes)
    onehot = (y[idx][:, None] == np.array(classes)[None, :]).astype(float)
    U, it, _ = solve_hard_multi(graph, idx, onehot)
    pred = np.array(classes)[np.argmax(U, axis=1)]
    return U, pred, it


def mnist_pipeline(X, y, k: int, m_grid: Sequence[int], trials: int, seed: int,
                   subsample: Optional[int] = None) -> MnistResult:
    """For each m and trial, label m points per class, solve the ten one-hot
    Laplace problems on the symmetrised kNN graph and record the error over
    the unlabeled points.  The error is fitted as error ~ m^-alpha."""
    X = np.asarray(X)
    y = np.asarray(y)
    if subsample is not None and subsample < X.shape[0]:
        keep = np.sort(np.random.default_rng([seed, 0x5EED]).choice(X.shape[0], subsample,
                                                                     replace=False))
        X, y = X[keep], y[keep]
    graph = build_knn_graph(X.astype(np.float64), k)
    records = []
    for m in m_grid:
        for t in range(trials):
            rng = np.random.default_rng(np.random.SeedSequence([seed, m, t]))
            idx = choose_labels(y, m, rng)
            _, pred, it = one_vs_rest(graph, y, idx)
            test = np.ones(y.shape[0], dtype=bool)
            test[idx] = False
            te = float(np.mean(pred[test] != y[test])) if test.any() else float("nan")
            tr = float(np.mean(pred[idx] != y[idx]))
            records.append(MnistRecord(int(m), t, te, tr, int(idx.size), int(it)))
    res = MnistResult(k, int(X.shape[0]), records, None)
    pts = [(s["m"], s["mean_error"]) for s in res.summary()
           if np.isfinite(s["mean_error"]) and s["mean_error"] > 0]
    if len({m for m, _ in pts}) >= 3:
        res.fit = fit_power_law_xy([p[0] for p in pts], [p[1] for p in pts], "m")
    return res


def write_mnist_records(path, records):
    names = [f.name for f in dataclasses.fields(MnistRecord)]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for r in records:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in (getattr(r, k) for k in names)) + "\n")
