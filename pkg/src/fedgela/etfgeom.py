"""Simplex equiangular tight frames and angle statistics.

The classifier geometry used throughout this package: C unit vectors in
d >= C dimensions whose pairwise inner products all equal -1/(C-1). A frame
is built from a seeded random rotation so runs are reproducible, and scaled
by sqrt(E_W) to form the (fixed) classifier.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

__all__ = [
    "OrthoMatrix",
    "EtfClassifier",
    "EtfReport",
    "random_rotation",
    "make_etf",
    "verify_etf",
    "mean_pairwise_angle",
]


def _frozen(a) -> np.ndarray:
    """Own a float64 copy and make it read-only."""
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class OrthoMatrix:
    """Column-orthonormal d x C matrix (a rotation onto a C-dim subspace)."""

    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", _frozen(self.entries))
        if self.entries.ndim != 2:
            raise ValueError("rotation must be a 2-D matrix")
        d, c = self.entries.shape
        if d < c:
            raise ValueError(f"orthonormal columns need d >= C, got d={d}, C={c}")
        gram = self.entries.T @ self.entries
        if np.max(np.abs(gram - np.eye(c))) > 1e-9:
            raise ValueError("matrix columns are not orthonormal (tol 1e-9)")

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    @property
    def n_classes(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class EtfClassifier:
    """Unit-column simplex frame with a squared-length scale for the classifier.

    `m` holds the C unit columns; the effective classifier is sqrt(scale) * m.
    Construction does not re-check the frame identities -- use verify_etf,
    which measures how far any candidate deviates from them.
    """

    m: np.ndarray
    scale: float
    u: OrthoMatrix

    def __post_init__(self):
        object.__setattr__(self, "m", _frozen(self.m))
        if self.m.ndim != 2:
            raise ValueError("frame must be a d x C matrix")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def d(self) -> int:
        return self.m.shape[0]

    @property
    def n_classes(self) -> int:
        return self.m.shape[1]

    @property
    def classifier(self) -> np.ndarray:
        """Effective d x C classifier matrix sqrt(scale) * m."""
        return math.sqrt(self.scale) * self.m


@dataclass(frozen=True)
class EtfReport:
    """Deviations of a candidate frame from the simplex identities."""

    max_norm_dev: float      # worst |column norm - 1|
    max_dot_dev: float       # worst |<m_i, m_j> + 1/(C-1)|, i != j
    col_sum_norm: float      # Euclidean norm of the column sum
    tol: float
    passed: bool


def random_rotation(d: int, n_classes: int, seed) -> OrthoMatrix:
    """Seeded column-orthonormal d x C matrix.

    Draws a d x C standard-normal matrix, orthonormalizes its columns in index
    order, then fixes each column's sign so its first nonzero entry is
    positive. Deterministic for a fixed seed.
    """
    d = int(d)
    c = int(n_classes)
    if d < 1 or c < 1:
        raise ValueError(f"dimensions must be positive, got d={d}, C={c}")
    if d < c:
        raise ValueError(f"rotation needs d >= C, got d={d}, C={c}")
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((d, c))
    q, _ = np.linalg.qr(gauss)  # reduced QR == Gram-Schmidt on columns in order
    for j in range(c):
        nz = np.nonzero(q[:, j])[0]
        if nz.size and q[nz[0], j] < 0:
            q[:, j] = -q[:, j]
    return OrthoMatrix(entries=q)


def make_etf(d: int, n_classes: int, seed, e_w: float = 1.0) -> EtfClassifier:
    """Simplex frame sqrt(C/(C-1)) * U (I - 11^T/C) with scale e_w.

    Columns are unit vectors summing to zero with pairwise inner products
    -1/(C-1); the classifier vectors are sqrt(e_w) times the columns.
    """
    c = int(n_classes)
    if c < 2:
        raise ValueError(f"invalid class count: need C >= 2, got C={c}")
    if not e_w > 0:
        raise ValueError(f"e_w must be positive, got {e_w}")
    u = random_rotation(d, c, seed)
    centering = np.eye(c) - np.full((c, c), 1.0 / c)
    m = math.sqrt(c / (c - 1.0)) * (u.entries @ centering)
    return EtfClassifier(m=m, scale=float(e_w), u=u)


def verify_etf(etf: EtfClassifier, tol: float = 1e-9) -> EtfReport:
    """Measure a frame's deviation from the simplex identities.

    Returns the worst column-norm deviation, worst pairwise-dot deviation
    and the norm of the column sum; `passed` is True when all three are
    below tol.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    m = etf.m
    c = m.shape[1]
    norms = np.linalg.norm(m, axis=0)
    max_norm_dev = float(np.max(np.abs(norms - 1.0)))
    gram = m.T @ m
    off_diag = gram[~np.eye(c, dtype=bool)]
    max_dot_dev = float(np.max(np.abs(off_diag + 1.0 / (c - 1.0)))) if c > 1 else 0.0
    col_sum_norm = float(np.linalg.norm(m.sum(axis=1)))
    passed = max(max_norm_dev, max_dot_dev, col_sum_norm) < tol
    return EtfReport(max_norm_dev, max_dot_dev, col_sum_norm, float(tol), passed)


def mean_pairwise_angle(vectors, index_subset=None) -> float:
    """Mean angle in degrees over all unordered pairs of the selected vectors.

    `vectors` is an iterable of equal-length vectors (or an n x d array);
    `index_subset` selects rows (default: all). Cosines are clamped to
    [-1, 1] before arccos to absorb floating-point overshoot.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        v = np.atleast_2d(v)
    if index_subset is None:
        idx = list(range(v.shape[0]))
    else:
        idx = sorted(int(i) for i in index_subset)
    if len(idx) < 2:
        raise ValueError(f"insufficient vectors: need >= 2, got {len(idx)}")
    sub = v[idx]
    norms = np.linalg.norm(sub, axis=1)
    if np.any(norms == 0.0):
        bad = idx[int(np.argmin(norms))]
        raise ValueError(f"degenerate vector: index {bad} has zero norm")
    unit = sub / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    pairs = [cos[i, j] for i, j in combinations(range(len(idx)), 2)]
    return float(np.degrees(np.arccos(pairs)).mean())
