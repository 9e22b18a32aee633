"""
Subspace Module for the Telescope Anomaly Toolkit
Batch PCA warm-up, incremental (Oja) PCA updates, residual projection and subspace distances
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from tqdm import tqdm

from .errors import ConfigError, SubspaceError
from .synthgen import NoiseSpec, build_factor_model, seed_sequence, synthesize_background

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-10
DEGENERATE_PIVOT = 1e-12
DEFAULT_ETA_GRID = (1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


@dataclass(frozen=True, eq=False)
class SubspaceEstimate:
    """Orthonormal basis of the estimated factor subspace and its PCA eigenvalues"""
    basis: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=float)
        if basis.ndim != 2:
            raise SubspaceError("Subspace basis must be a p x k matrix")
        eigenvalues = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        if eigenvalues.size != basis.shape[1]:
            raise SubspaceError(
                f"Expected {basis.shape[1]} eigenvalues, got {eigenvalues.size}"
            )
        if np.any(np.diff(eigenvalues) > ORTHONORMAL_TOLERANCE * max(1.0, float(np.max(eigenvalues, initial=0.0)))):
            raise SubspaceError("Eigenvalues must be sorted in non-increasing order")
        gram = basis.T @ basis
        if not np.allclose(gram, np.eye(basis.shape[1]), atol=ORTHONORMAL_TOLERANCE, rtol=0.0):
            raise SubspaceError("Subspace basis columns must be orthonormal")
        object.__setattr__(self, 'basis', basis)
        object.__setattr__(self, 'eigenvalues', np.clip(eigenvalues, 0.0, None))

    @property
    def p(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def empty(cls, p: int) -> 'SubspaceEstimate':
        """Zero-dimensional estimate: residuals equal the centered data"""
        return cls(basis=np.zeros((p, 0)), eigenvalues=np.zeros(0))


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    matrix: np.ndarray
    n_samples: int


def sample_covariance(X: np.ndarray, center: bool = False) -> CovarianceEstimate:
    """(1/n) sum x_t x_t' over the columns of X, optionally mean-centered"""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ConfigError("Sample covariance needs a p x n matrix with n >= 2")
    if center:
        X = X - X.mean(axis=1, keepdims=True)
    matrix = X @ X.T / X.shape[1]
    return CovarianceEstimate(matrix=0.5 * (matrix + matrix.T), n_samples=X.shape[1])


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of every column positive"""
    if vectors.shape[1] == 0:
        return vectors
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def top_eigenspace(matrix: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Top-k eigenvectors (sign-fixed) and all eigenvalues in non-increasing order"""
    eigenvalues, vectors = linalg.eigh(np.asarray(matrix, dtype=float))
    eigenvalues = eigenvalues[::-1]
    vectors = vectors[:, ::-1]
    return _fix_signs(vectors[:, :k]), eigenvalues


def batch_pca(X_warmup: np.ndarray, var_fraction: float = 0.9,
              n_components: Optional[int] = None) -> SubspaceEstimate:
    """PCA of the centered warm-up window.

    k is the smallest number of components whose eigenvalues explain at least
    ``var_fraction`` of the total variance, unless ``n_components`` pins it.
    """
    if not 0.0 < var_fraction <= 1.0:
        raise ConfigError(f"Variance fraction must lie in (0, 1], got {var_fraction}")

    covariance = sample_covariance(X_warmup, center=True)
    p = covariance.matrix.shape[0]
    basis, eigenvalues = top_eigenspace(covariance.matrix, p)
    eigenvalues = np.clip(eigenvalues, 0.0, None)

    total = eigenvalues.sum()
    if total <= 0.0:
        raise SubspaceError("Warm-up data is constant; PCA has no variance to explain")

    if n_components is not None:
        if not 0 <= n_components <= p:
            raise ConfigError(f"n_components must lie in [0, {p}], got {n_components}")
        k = int(n_components)
    else:
        nonzero = int(np.sum(eigenvalues > DEGENERATE_PIVOT * eigenvalues[0]))
        explained = np.cumsum(eigenvalues) / total
        k = int(np.searchsorted(explained, var_fraction - 1e-12)) + 1
        k = min(k, nonzero)

    logger.info(f"Batch PCA kept k={k} of {p} components "
                f"({eigenvalues[:k].sum() / total:.1%} of variance)")
    return SubspaceEstimate(basis=basis[:, :k], eigenvalues=eigenvalues[:k])


def orthonormalize(M: np.ndarray) -> np.ndarray:
    """QR-based orthonormalization that keeps each column's orientation"""
    q, r = np.linalg.qr(M)
    diagonal = np.diag(r)
    scale = max(1.0, float(np.max(np.abs(diagonal), initial=0.0)))
    if np.any(np.abs(diagonal) < DEGENERATE_PIVOT * scale):
        logger.warning("Near-degenerate subspace update, re-orthonormalizing with jitter")
        jitter = np.random.default_rng(0).standard_normal(M.shape) * DEGENERATE_PIVOT * scale
        q, r = np.linalg.qr(M + jitter)
        diagonal = np.diag(r)
    signs = np.where(diagonal < 0, -1.0, 1.0)
    return q * signs


def ipca_update(est: SubspaceEstimate, x: np.ndarray, mean: np.ndarray, eta: float) -> SubspaceEstimate:
    """One Oja step on the centered sample: B <- orth(B + eta (x - m)(x - m)' B)"""
    if eta < 0.0 or eta >= 1.0:
        raise ConfigError(f"iPCA step must lie in [0, 1), got {eta}")
    if est.k == 0 or eta == 0.0:
        return est
    centered = np.asarray(x, dtype=float) - mean
    direction = centered @ est.basis
    if not np.any(direction):
        return est
    updated = est.basis + eta * np.outer(centered, direction)
    return SubspaceEstimate(basis=orthonormalize(updated), eigenvalues=est.eigenvalues)


def project_residual(x: np.ndarray, mean: np.ndarray, est: SubspaceEstimate) -> np.ndarray:
    """r = (I - B (B'B)^-1 B')(x - mean); the basis is orthonormal so B'B = I"""
    centered = np.asarray(x, dtype=float) - mean
    if est.k == 0:
        return centered.copy()
    return centered - est.basis @ (est.basis.T @ centered)


def principal_angles(W_hat: np.ndarray, W: np.ndarray) -> np.ndarray:
    """All principal angles between span(W_hat) and span(W), largest first"""
    W_hat = np.atleast_2d(np.asarray(W_hat, dtype=float).T).T
    W = np.atleast_2d(np.asarray(W, dtype=float).T).T
    if W_hat.shape[1] == 0 or W.shape[1] == 0:
        raise SubspaceError("Principal angles are undefined for zero-dimensional subspaces")
    return np.clip(linalg.subspace_angles(W_hat, W), 0.0, np.pi / 2)


def largest_principal_angle(W_hat: np.ndarray, W: np.ndarray) -> float:
    return float(np.max(principal_angles(W_hat, W)))


def smallest_principal_angle(W_hat: np.ndarray, W: np.ndarray) -> float:
    """acos of the largest canonical correlation"""
    return float(np.min(principal_angles(W_hat, W)))


def _projector(B: np.ndarray) -> np.ndarray:
    B = np.atleast_2d(np.asarray(B, dtype=float).T).T
    if B.shape[1] == 0:
        return np.zeros((B.shape[0], B.shape[0]))
    Q = linalg.orth(B)
    return Q @ Q.T


def projector_distance(B0_hat: np.ndarray, B0: np.ndarray) -> float:
    """Operator norm of the difference between the two orthogonal projectors"""
    return float(np.linalg.norm(_projector(B0_hat) - _projector(B0), 2))


def davis_kahan_bound(sigma_hat: CovarianceEstimate, sigma: CovarianceEstimate,
                      k: int) -> Tuple[float, float, bool]:
    """Compare ||P_hat - P|| of the top-k eigenspaces against 2 sqrt(k) ||S_hat - S|| / lambda_k.

    lambda_k is the k-th eigenvalue of ``sigma``; for the rank-k covariances of
    the factor model it equals the eigengap.
    """
    if k < 1:
        raise SubspaceError(f"Eigenspace dimension must be positive, got {k}")
    true_basis, eigenvalues = top_eigenspace(sigma.matrix, k)
    lambda_k = float(eigenvalues[k - 1])
    if lambda_k <= DEGENERATE_PIVOT * max(1.0, float(eigenvalues[0])):
        raise SubspaceError(f"lambda_{k} = {lambda_k:.3e}: eigengap assumption violated")

    perturbation = float(np.linalg.norm(sigma_hat.matrix - sigma.matrix, 2))
    bound = 2.0 * np.sqrt(k) * perturbation / lambda_k
    estimated_basis, _ = top_eigenspace(sigma_hat.matrix, k)
    empirical = projector_distance(estimated_basis, true_basis)
    return bound, empirical, bool(empirical <= bound + 1e-9)


def track_subspace(X: np.ndarray, initial: SubspaceEstimate, mean: np.ndarray, eta: float,
                   mean_memory: float = 1e-3) -> Tuple[SubspaceEstimate, np.ndarray]:
    """Run iPCA over the columns of X with an EWMA estimate of the data mean"""
    est = initial
    mean = np.array(mean, dtype=float)
    for x in np.asarray(X, dtype=float).T:
        mean = (1.0 - mean_memory) * mean + mean_memory * x
        est = ipca_update(est, x, mean, eta)
    return est, mean


@dataclass(frozen=True)
class AngleSweepRow:
    eta: float
    mean_angle_rad: float
    batch_angle_rad: float


def angle_sweep(etas: Sequence[float] = DEFAULT_ETA_GRID, replications: int = 10, weeks: int = 10,
                p: int = 100, k: int = 5, seed=0, warmup_len: int = 10080,
                noise: Optional[NoiseSpec] = None, amplitude: float = 1.0,
                mean_memory: float = 1e-3, progress: bool = True) -> List[AngleSweepRow]:
    """Largest principal angle between the iPCA estimate and the true trend subspace per memory eta.

    Every replication draws a fresh anomaly-free factor model; the same draws are
    reused across the eta grid. The batch reference is a PCA of the full series.
    """
    T = weeks * 5040
    if T <= warmup_len:
        raise ConfigError(f"{weeks} weeks do not leave data after a warm-up of {warmup_len}")

    angles = np.zeros((len(etas), replications))
    batch_angles = np.zeros(replications)
    for rep, child in enumerate(tqdm(seed_sequence(seed).spawn(replications),
                                     desc="angle sweep", disable=not progress)):
        model_seed, noise_seed = child.spawn(2)
        model = build_factor_model(p, k, noise or NoiseSpec(), seed=model_seed, amplitude=amplitude)
        X = synthesize_background(model, T, noise_seed)
        truth = model.loadings

        batch_angles[rep] = largest_principal_angle(batch_pca(X, n_components=k).basis, truth)

        warmup = X[:, :warmup_len]
        initial = batch_pca(warmup, n_components=k)
        for i, eta in enumerate(etas):
            est, _ = track_subspace(X[:, warmup_len:], initial, warmup.mean(axis=1), eta, mean_memory)
            angles[i, rep] = largest_principal_angle(est.basis, truth)

    rows = [
        AngleSweepRow(eta=float(eta), mean_angle_rad=float(angles[i].mean()),
                      batch_angle_rad=float(batch_angles.mean()))
        for i, eta in enumerate(etas)
    ]
    for row in rows:
        logger.info(f"eta={row.eta:.0e}: mean angle {row.mean_angle_rad:.4f} rad "
                    f"(batch {row.batch_angle_rad:.4f})")
    return rows
