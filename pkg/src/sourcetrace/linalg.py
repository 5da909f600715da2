"""Dense symmetric linear algebra for the distribution metrics.

Gaussian moment estimation and the PSD matrix square root needed by
the Fréchet distance between embedding distributions.  Everything is
computed in 64-bit floats regardless of how the inputs were stored.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, NotPsdError, ShapeError

# Tolerances are absolute for unit-scale matrices and grow with the
# magnitude of the input so that large but well-conditioned covariances
# are not rejected on float noise.
SYMMETRY_TOL = 1e-9
EIGENVALUE_TOL = 1e-9


def _as_matrix(s, name: str = "matrix") -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ShapeError(f"{name} contains non-finite entries")
    return s


def _check_symmetric(s: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.abs(s).max(initial=0.0)))
    asym = float(np.abs(s - s.T).max(initial=0.0))
    if asym > SYMMETRY_TOL * scale:
        raise NotPsdError(
            f"{name} is asymmetric beyond tolerance (max |S - S^T| = {asym:.3e})"
        )


@dataclass
class MeanCov:
    """Gaussian moments (mean vector, covariance matrix) of an embedding set.

    ``n`` is the number of samples the moments were estimated from.
    The covariance is stored exactly symmetric and must be PSD up to a
    small eigenvalue tolerance.
    """

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.n < 2:
            raise DegenerateInputError("moment estimates require n >= 2 samples")
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ShapeError(
                f"covariance shape {self.cov.shape} does not match mean dimension {d}"
            )
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise ShapeError("moments contain non-finite entries")
        if float(np.abs(self.cov - self.cov.T).max(initial=0.0)) > 1e-12:
            raise NotPsdError("covariance must be symmetric to within 1e-12")
        scale = max(1.0, float(np.abs(self.cov).max(initial=0.0)))
        if self.cov.size and float(np.linalg.eigvalsh(self.cov).min()) < -EIGENVALUE_TOL * scale:
            raise NotPsdError("covariance has a significantly negative eigenvalue")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def estimate_moments(x) -> MeanCov:
    """Column mean and unbiased (n-1 denominator) sample covariance of the rows.

    The covariance is symmetrized as (C + C^T)/2 so downstream symmetric
    eigensolvers see an exactly symmetric matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-d sample matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise DegenerateInputError(f"need at least 2 rows to estimate moments, got {n}")
    if d < 1:
        raise ShapeError("sample matrix must have at least one column")
    if not np.all(np.isfinite(x)):
        raise ShapeError("sample matrix contains non-finite entries")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    return MeanCov(mean=mean, cov=cov, n=n)


def sym_eig(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, eigenvectors as columns) such that
    S = V diag(w) V^T.
    """
    s = _as_matrix(s)
    _check_symmetric(s, "matrix")
    w, v = np.linalg.eigh(s)
    return w, v


def psd_sqrt(s) -> np.ndarray:
    """Symmetric square root R of a PSD matrix S, with R @ R = S.

    Eigenvalues that are slightly negative (within tolerance) are
    clamped to zero; significantly negative ones raise NotPsdError.
    """
    s = _as_matrix(s)
    _check_symmetric(s, "matrix")
    w, v = np.linalg.eigh(s)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if float(w.min(initial=0.0)) < -EIGENVALUE_TOL * scale:
        raise NotPsdError(
            f"matrix is not PSD (smallest eigenvalue {w.min():.3e})"
        )
    root = v @ np.diag(np.sqrt(np.maximum(w, 0.0))) @ v.T
    return (root + root.T) / 2.0
