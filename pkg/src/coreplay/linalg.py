"""Dense numeric kernel: symmetric eigendecomposition and seeded k-means++.

All routines work on float64 numpy arrays validated at entry. The
eigensolver is a cyclic Jacobi sweep, which is plenty for the matrices this
package produces (a few hundred rows at most) and converges provably.
"""

from dataclasses import dataclass, field

import numpy as np

SYMMETRY_TOL = 1e-10
JACOBI_OFFDIAG_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class NonFiniteError(ValueError):
    """Matrix contains NaN or Inf entries."""


class NonSymmetricError(ValueError):
    """Matrix asymmetry exceeds tolerance."""


class TooFewPointsError(ValueError):
    """Requested more clusters than there are points."""


def as_matrix(a, name="matrix"):
    """Coerce to a finite 2-D float64 array (copies only when needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return m


@dataclass
class EigenDecomposition:
    eigenvalues: np.ndarray   # ascending
    eigenvectors: np.ndarray  # column i pairs with eigenvalues[i]


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list = field(default_factory=list)


def sym_eigen(a) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps run until the off-diagonal Frobenius norm drops below
    1e-12 times the diagonal norm, or 100 sweeps.
    """
    a = as_matrix(a, "sym_eigen input")
    n, m = a.shape
    if n != m:
        raise NonSymmetricError(f"matrix is {n}x{m}, not square")
    asym = np.max(np.abs(a - a.T)) if n else 0.0
    if asym > SYMMETRY_TOL:
        raise NonSymmetricError(f"asymmetry {asym:.3e} exceeds {SYMMETRY_TOL}")

    A = 0.5 * (a + a.T)  # work copy, exactly symmetric
    V = np.eye(n)
    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off <= JACOBI_OFFDIAG_TOL * np.linalg.norm(np.diag(A)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = float(A[p, q])
                if apq == 0.0:
                    continue
                # plain-float math: IEEE inf instead of numpy overflow warnings
                theta = (float(A[q, q]) - float(A[p, p])) / (2.0 * apq)
                if abs(theta) > 1e150:  # theta^2 would overflow
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/cols p and q of A
                row_p = A[p].copy()
                row_q = A[q].copy()
                A[p] = c * row_p - s * row_q
                A[q] = s * row_p + c * row_q
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                # accumulate rotation
                vp = V[:, p].copy()
                V[:, p] = c * vp - s * V[:, q]
                V[:, q] = s * vp + c * V[:, q]

    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return EigenDecomposition(eigenvalues=w[order], eigenvectors=V[:, order])


def singular_values(a) -> np.ndarray:
    """Singular values of ``a``, descending, via sym_eigen of A^T A."""
    a = as_matrix(a, "singular_values input")
    if a.size == 0:
        raise ValueError("singular_values needs a nonempty matrix")
    gram = a.T @ a
    evals = sym_eigen(gram).eigenvalues
    sv = np.sqrt(np.maximum(evals, 0.0))[::-1]
    return sv[: min(a.shape)]


def kmeans(points, k: int, seed, max_iter: int = 100) -> KMeansResult:
    """Seeded k-means++ initialization followed by Lloyd iterations.

    Runs until the assignment reaches a fixpoint or ``max_iter``. Empty
    clusters are reseeded at the point farthest from its current centroid.
    Deterministic for fixed (points, k, seed).
    """
    pts = as_matrix(points, "kmeans points")
    n = pts.shape[0]
    if k < 1:
        raise TooFewPointsError("k must be >= 1")
    if k > n:
        raise TooFewPointsError(f"k={k} exceeds number of points {n}")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(pts, k, rng)

    assign = np.full(n, -1, dtype=np.int64)
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(pts, centroids)
        new_assign = np.argmin(d2, axis=1)
        new_assign = _repair_empty(pts, centroids, new_assign, d2, k)
        history.append(float(np.sum(
            np.take_along_axis(d2, new_assign[:, None], axis=1))))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = pts[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)

    d2 = _sq_dists(pts, centroids)
    inertia = float(np.sum(np.take_along_axis(d2, assign[:, None], axis=1)))
    return KMeansResult(assignments=assign, centroids=centroids,
                        inertia=inertia, inertia_history=history)


def _kmeanspp_init(pts, k, rng):
    n = pts.shape[0]
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    for j in range(1, k):
        d2 = np.min(_sq_dists(pts, centroids[:j]), axis=1)
        total = d2.sum()
        if total > 0.0:
            centroids[j] = pts[rng.choice(n, p=d2 / total)]
        else:
            centroids[j] = pts[rng.integers(n)]
    return centroids


def _repair_empty(pts, centroids, assign, d2, k):
    counts = np.bincount(assign, minlength=k)
    for c in np.where(counts == 0)[0]:
        cur = np.take_along_axis(d2, assign[:, None], axis=1).ravel()
        far = int(np.argmax(cur))  # ties -> lowest index
        centroids[c] = pts[far]
        assign[far] = c
        d2[:, c] = np.sum((pts - centroids[c]) ** 2, axis=1)
    return assign


def _sq_dists(a, b):
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2
