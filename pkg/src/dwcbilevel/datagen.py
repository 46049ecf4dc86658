"""Seeded synthetic datasets for the three benchmark tasks."""
import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, toeplitz

from .applications import ElasticNetTask, SglTask, Splits, SvmTask

SQUARE_SIDE = 4.0 * np.sqrt(np.arccos(1.0 / np.sqrt(5.0)))


@dataclass
class GenSpec:
    kind: str
    n_train: int = 100
    n_val: int = 100
    n_test: int = 300
    p: int = 50
    groups: int = 10
    snr: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("elastic-net", "sgl", "svm"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if min(self.n_train, self.n_val, self.n_test, self.p) < 1:
            raise ValueError("sizes must be positive")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.kind == "elastic-net" and self.p < 15:
            raise ValueError("elastic net data needs p >= 15")
        if self.kind == "sgl":
            if self.p % 5 or self.p < 25:
                raise ValueError("sgl data needs p divisible by 5 and p >= 25")
            if self.groups < 1 or self.p % self.groups:
                raise ValueError("p must be divisible by the number of groups")


def _split(A, b, spec):
    i, j = spec.n_train, spec.n_train + spec.n_val
    return Splits(A[:i], b[:i], A[i:j], b[i:j], A[j:], b[j:])


def _noise_scale(signal, eps, snr):
    return float(np.linalg.norm(signal) / (snr * np.linalg.norm(eps)))


def ar_covariance(p, rho=0.5):
    return toeplitz(rho ** np.arange(p))


def gen_elastic_net(spec: GenSpec) -> ElasticNetTask:
    """AR(0.5) Gaussian covariates, 15 unit coefficients evenly spaced."""
    if spec.p < 15:
        raise ValueError("elastic net data needs p >= 15")
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val + spec.n_test
    L = cholesky(ar_covariance(spec.p), lower=True)
    A = rng.standard_normal((n, spec.p)) @ L.T
    beta = np.zeros(spec.p)
    beta[np.round(np.arange(15) * spec.p / 15).astype(int)] = 1.0
    eps = rng.standard_normal(n)
    signal = A @ beta
    sd = _noise_scale(signal, eps, spec.snr)
    b = signal + sd * eps
    return ElasticNetTask(_split(A, b, spec), beta_bar=np.full(spec.p, 2.0),
                          beta_true=beta, noise_sd=sd)


def sgl_coefficients(p):
    if p % 5:
        raise ValueError("p must be divisible by 5")
    size = p // 5
    if size < 5:
        raise ValueError("p must be at least 25")
    beta = np.zeros(p)
    for i in range(1, 6):
        beta[(i - 1) * size:(i - 1) * size + 5] = np.arange(5) + i
    return beta


def gen_sgl(spec: GenSpec) -> SglTask:
    """Standard normal covariates, coefficient blocks ``[i, ..., i+4, 0, ...]``."""
    if spec.p % spec.groups:
        raise ValueError("p must be divisible by the number of groups")
    beta = sgl_coefficients(spec.p)
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val + spec.n_test
    A = rng.standard_normal((n, spec.p))
    eps = rng.standard_normal(n)
    signal = A @ beta
    sd = _noise_scale(signal, eps, spec.snr)
    b = signal + sd * eps
    size = spec.p // spec.groups
    groups = [(m * size, (m + 1) * size) for m in range(spec.groups)]
    return SglTask(_split(A, b, spec), groups, beta_true=beta, noise_sd=sd)


# two crossed ellipses with semi-axes 2 and 1 centered at the origin; their
# union has area 8 arcsec(sqrt 5), half of the square, so classes balance
ELLIPSES = (((0.0, 0.0), (2.0, 1.0)), ((0.0, 0.0), (1.0, 2.0)))


def in_ellipses(P, ellipses=ELLIPSES):
    """Membership in a union of axis-aligned ellipses given as (center, semi-axes)."""
    inside = np.zeros(len(P), bool)
    for (cx, cy), (ax, ay) in ellipses:
        inside |= ((P[:, 0] - cx) / ax) ** 2 + ((P[:, 1] - cy) / ay) ** 2 <= 1.0
    return inside


def svm_labels(P, **geom):
    return np.where(in_ellipses(P, **geom), -1.0, 1.0)


def gen_svm(spec: GenSpec, noise_sd=0.2, ellipses=ELLIPSES, max_tries=100) -> SvmTask:
    """Uniform points in a square, labelled by a two-ellipse region, then jittered.

    ``noise_sd`` is the standard deviation of the Gaussian jitter added to
    each coordinate after labelling.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val + spec.n_test
    half = 0.5 * SQUARE_SIDE
    for _ in range(max_tries):
        P = rng.uniform(-half, half, size=(n, 2))
        b = svm_labels(P, ellipses=ellipses)
        A = P + noise_sd * rng.standard_normal((n, 2))
        s = _split(A, b, spec)
        if all(len(np.unique(y)) == 2 for y in (s.b_tr, s.b_val, s.b_te)):
            return SvmTask(s)
    raise RuntimeError("could not draw splits containing both classes")


def generate(spec: GenSpec):
    return {"elastic-net": gen_elastic_net, "sgl": gen_sgl, "svm": gen_svm}[spec.kind](spec)


def write_csv(task, path):
    """Write a task as CSV: split name, feature columns, response column."""
    s = task.splits
    p = s.A_tr.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split"] + [f"a{j}" for j in range(p)] + ["b"])
        for name, A, b in (("train", s.A_tr, s.b_tr), ("val", s.A_val, s.b_val),
                           ("test", s.A_te, s.b_te)):
            for row, y in zip(A, b):
                w.writerow([name] + [repr(float(v)) for v in row] + [repr(float(y))])


def read_csv(path) -> Splits:
    """Read splits written by :func:`write_csv` (or any CSV with a ``split`` column)."""
    rows = {"train": [], "val": [], "test": []}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[0] != "split":
            raise ValueError("first column must be 'split'")
        for line in r:
            rows[line[0]].append([float(v) for v in line[1:]])
    arrs = {k: np.array(v, float).reshape(-1, len(header) - 1) for k, v in rows.items()}
    return Splits(arrs["train"][:, :-1], arrs["train"][:, -1], arrs["val"][:, :-1],
                  arrs["val"][:, -1], arrs["test"][:, :-1], arrs["test"][:, -1])
