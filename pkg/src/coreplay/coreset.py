"""Selection core: gradient dissimilarities, facility location, clustering.

``greedy_select`` is the plain coverage greedy over the facility-location
objective F(S) = sum_i max_{j in S} (d0 - d_ij); ``lazy_greedy_select`` is a
priority-queue accelerator guaranteed to produce identical output. The
per-class selection unit ``crust_select`` first gates the pool to its
dominant gradient cluster (clean-label gradients cluster together; corrupted
ones land far from that mass) and then runs the greedy inside the gate.
The cosine variant clusters gradients spectrally under cosine distance,
drops small clusters, and selects within the kept ones.
"""

import heapq
import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import kmeans, singular_values, sym_eigen

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
# Separation (in pooled spread units) at which the far side of the
# distance-to-medoid distribution is treated as detached from the
# coherent gradient cluster around the medoid.
GATE_SEPARATION = 3.0


class EmptySetError(ValueError):
    pass


class BadKError(ValueError):
    pass


class DegenerateAffinityError(ValueError):
    pass


@dataclass
class DissimilarityMatrix:
    values: np.ndarray  # (n, n) symmetric, zero diagonal
    metric: str         # euclidean | cosine
    d0: float           # upper bound on entries (tight by default)

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("dissimilarity matrix must be square")
        if np.max(np.abs(v - v.T), initial=0.0) > SYMMETRY_TOL:
            raise ValueError("dissimilarity matrix must be symmetric")
        if np.any(np.diag(v) != 0.0):
            raise ValueError("dissimilarity matrix must have a zero diagonal")
        if np.any(v < 0.0):
            raise ValueError("dissimilarities must be nonnegative")
        if self.d0 < np.max(v, initial=0.0):
            raise ValueError("d0 must bound all entries")
        if self.metric == "cosine" and np.max(v, initial=0.0) > 2.0 + 1e-12:
            raise ValueError("cosine dissimilarities must lie in [0, 2]")

    def __len__(self):
        return self.values.shape[0]


@dataclass
class CoresetSelection:
    ids: np.ndarray                 # greedy insertion order
    objective_value: float          # F(S) over the pool it was selected from
    cluster_provenance: Optional[np.ndarray] = None  # cluster id per selected


@dataclass
class ClusterAssignment:
    labels: np.ndarray      # cluster id per sample, dense 0..k_clusters-1
    sizes: np.ndarray
    kept: np.ndarray        # cluster ids with size > min_cluster_size
    k_clusters: int
    min_cluster_size: int


@dataclass
class SpectrumReport:
    singular_values: np.ndarray  # descending
    split_index: int             # information/nuisance boundary, 1-based
    split_ratio: float


def _rows(g):
    """Accept a GradientFeatures-like object or a raw 2-D array."""
    values = getattr(g, "values", g)
    return np.asarray(values, dtype=np.float64)


def pairwise_dissimilarity(g, metric="euclidean") -> DissimilarityMatrix:
    """Pairwise gradient dissimilarities with a tight upper bound d0.

    Euclidean: ||g_i - g_j||_2. Cosine: 1 - cos(g_i, g_j); a zero-norm row
    is at distance 1 from any other row and 0 from another zero row.
    """
    rows = _rows(g)
    if rows.shape[0] < 1:
        raise ValueError("need at least one gradient row")
    if metric == "euclidean":
        sq = np.sum(rows * rows, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * rows @ rows.T
        np.maximum(d2, 0.0, out=d2)
        d = np.sqrt(d2)
    elif metric == "cosine":
        norms = np.linalg.norm(rows, axis=1)
        zero = norms == 0.0
        safe = np.where(zero, 1.0, norms)
        unit = rows / safe[:, None]
        d = 1.0 - unit @ unit.T
        np.clip(d, 0.0, 2.0, out=d)
        if zero.any():
            d[zero, :] = 1.0
            d[:, zero] = 1.0
            d[np.ix_(zero, zero)] = 0.0
    else:
        raise ValueError(f"unknown metric {metric!r}")
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return DissimilarityMatrix(values=d, metric=metric,
                               d0=float(np.max(d, initial=0.0)))


def facility_location_value(d: DissimilarityMatrix, selected) -> float:
    """F(S) = sum_i (d0 - min_{j in S} d_ij)."""
    ids = np.asarray(list(selected), dtype=np.int64)
    if ids.size == 0:
        raise EmptySetError("facility location value needs a nonempty set")
    if ids.min() < 0 or ids.max() >= len(d):
        raise ValueError("selected ids out of range")
    mins = np.min(d.values[ids, :], axis=0)
    return float(np.sum(d.d0 - mins))


def greedy_select(d: DissimilarityMatrix, k: int) -> CoresetSelection:
    """Plain coverage greedy: k insertions maximizing marginal gain.

    Maintains each point's current minimum distance so the whole run is
    O(nk) gain evaluations. Ties break toward the lowest id.
    """
    n = len(d)
    if not 1 <= k <= n:
        raise BadKError(f"k={k} outside [1, {n}]")
    mind = np.full(n, d.d0)
    selected = np.empty(k, dtype=np.int64)
    taken = np.zeros(n, dtype=bool)
    for t in range(k):
        gains = np.sum(np.maximum(mind[None, :] - d.values, 0.0), axis=1)
        gains[taken] = -np.inf
        e = int(np.argmax(gains))
        selected[t] = e
        taken[e] = True
        np.minimum(mind, d.values[e], out=mind)
    value = float(np.sum(d.d0 - mind))
    return CoresetSelection(ids=selected, objective_value=value)


def lazy_greedy_select(d: DissimilarityMatrix, k: int) -> CoresetSelection:
    """Priority-queue greedy; output is identical to ``greedy_select``."""
    n = len(d)
    if not 1 <= k <= n:
        raise BadKError(f"k={k} outside [1, {n}]")
    mind = np.full(n, d.d0)
    gains0 = np.sum(np.maximum(mind[None, :] - d.values, 0.0), axis=1)
    heap = [(-gains0[i], i, 0) for i in range(n)]
    heapq.heapify(heap)
    selected = np.empty(k, dtype=np.int64)
    taken = np.zeros(n, dtype=bool)
    for t in range(1, k + 1):
        while True:
            neg_gain, i, stamp = heapq.heappop(heap)
            if taken[i]:
                continue
            if stamp == t:
                break
            gain = float(np.sum(np.maximum(mind - d.values[i], 0.0)))
            heapq.heappush(heap, (-gain, i, t))
        selected[t - 1] = i
        taken[i] = True
        np.minimum(mind, d.values[i], out=mind)
    value = float(np.sum(d.d0 - mind))
    return CoresetSelection(ids=selected, objective_value=value)


def dominant_cluster_indices(d: DissimilarityMatrix,
                             separation=GATE_SEPARATION) -> np.ndarray:
    """Indices of the coherent gradient cluster around the pool medoid.

    Each point's distance to the medoid is split with an exact 1-D
    two-means cut; when the far side sits at least ``separation`` pooled
    standard deviations away, it is a detached mass (mislabeled samples
    form such translate bundles) and the near side is returned. Without a
    detached mass, a median + 3*MAD fence trims only the far fringe of the
    distribution, which is neutral on unimodal pools.
    """
    n = len(d)
    if n <= 2:
        return np.arange(n)
    medoid = int(np.argmin(np.sum(d.values, axis=1)))
    dist = d.values[medoid]
    order = np.argsort(dist, kind="stable")
    ds = dist[order]
    split = _two_means_split(ds)
    if split is not None:
        near, far = ds[:split], ds[split:]
        spread = near.std() + far.std()
        if far.mean() - near.mean() >= separation * (spread + 1e-12):
            return np.sort(order[:split])
    med = np.median(dist)
    mad = np.median(np.abs(dist - med))
    fence = med + 3.0 * mad
    keep = np.where(dist <= fence)[0]
    return keep if len(keep) else np.arange(n)


def _two_means_split(sorted_vals):
    """Index minimizing two-segment SSE of a sorted 1-D array."""
    n = len(sorted_vals)
    pref = np.cumsum(sorted_vals)
    pref2 = np.cumsum(sorted_vals ** 2)
    counts = np.arange(1, n, dtype=np.float64)
    m1 = pref[:-1] / counts
    m2 = (pref[-1] - pref[:-1]) / (n - counts)
    sse = (pref2[:-1] - counts * m1 ** 2) + (pref2[-1] - pref2[:-1] - (n - counts) * m2 ** 2)
    if not len(sse):
        return None
    return int(np.argmin(sse)) + 1


def crust_select(g, k: int, outlier_gate=True) -> CoresetSelection:
    """Per-class CRUST unit: euclidean dissimilarity, then coverage greedy.

    With ``outlier_gate`` (the default used by the continual loop) the
    greedy runs inside the dominant gradient cluster; candidates whose
    gradients sit far from that mass are never selected unless the gate
    keeps fewer than k points, in which case the nearest leftovers backfill
    the budget. ``outlier_gate=False`` gives the ungated k-medoids
    behavior, which deliberately spans outlying clusters.
    """
    rows = _rows(g)
    n = rows.shape[0]
    if not 1 <= k <= n:
        raise BadKError(f"k={k} outside [1, {n}]")
    d = pairwise_dissimilarity(rows, "euclidean")
    if not outlier_gate:
        sel = lazy_greedy_select(d, k)
        return CoresetSelection(ids=sel.ids, objective_value=sel.objective_value)
    keep = dominant_cluster_indices(d)
    keep = _extend_for_budget(rows, d, keep, k)
    sub = DissimilarityMatrix(values=d.values[np.ix_(keep, keep)],
                              metric="euclidean", d0=d.d0)
    sel = lazy_greedy_select(sub, min(k, len(keep)))
    ids = keep[sel.ids]
    return CoresetSelection(ids=ids,
                            objective_value=facility_location_value(d, ids))


def _extend_for_budget(rows, d, keep, k):
    """Grow a gated pool until it offers k distinct candidate rows.

    Duplicates carry zero marginal gain, so a gate that kept only copies of
    a few points would waste budget; leftovers join in order of distance to
    the medoid (ties toward the lowest id).
    """
    n = rows.shape[0]
    if len(keep) == n:
        return keep
    distinct_total = len(np.unique(rows, axis=0))
    target = min(k, distinct_total)
    distinct_kept = len(np.unique(rows[keep], axis=0))
    if distinct_kept >= target and len(keep) >= k:
        return keep
    medoid = int(np.argmin(np.sum(d.values, axis=1)))
    rest = np.setdiff1d(np.arange(n), keep)
    order = rest[np.lexsort((rest, d.values[medoid, rest]))]
    keep = list(keep)
    seen = {rows[i].tobytes() for i in keep}
    for i in order:
        if len(seen) >= target and len(keep) >= k:
            break
        keep.append(i)
        seen.add(rows[i].tobytes())
    return np.sort(np.asarray(keep, dtype=np.int64))


def spectral_cluster(g, k_clusters: int, seed) -> ClusterAssignment:
    """Spectral clustering of gradient rows under cosine distance.

    Affinity a_ij = 1 - cos_dist/2 with a zero diagonal; symmetric
    normalized Laplacian; rows of the k smallest eigenvectors are
    row-normalized and clustered with seeded k-means++.
    """
    rows = _rows(g)
    n = rows.shape[0]
    if not 2 <= k_clusters <= n:
        raise BadKError(f"k_clusters={k_clusters} outside [2, {n}]")
    d = pairwise_dissimilarity(rows, "cosine")
    a = 1.0 - d.values / 2.0
    np.fill_diagonal(a, 0.0)
    deg = a.sum(axis=1)
    if np.any(deg <= 0.0):
        raise DegenerateAffinityError("a row of the affinity matrix sums to 0")
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)
    dec = sym_eigen(lap)
    emb = dec.eigenvectors[:, :k_clusters]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    emb = emb / norms
    res = kmeans(emb, k_clusters, seed)
    sizes = np.bincount(res.assignments, minlength=k_clusters)
    return ClusterAssignment(labels=res.assignments, sizes=sizes,
                             kept=np.array([], dtype=np.int64),
                             k_clusters=k_clusters, min_cluster_size=0)


def default_min_cluster_size(n):
    return max(2, int(np.ceil(0.05 * n)))


def default_k_clusters(n, min_size):
    return min(8, n // (2 * min_size + 1), n)


def cosine_crust_select(g, k: int, k_clusters=None, min_size=None,
                        seed=0) -> CoresetSelection:
    """Cluster-filter-optimize pipeline over cosine gradient geometry.

    Spectrally clusters the rows, drops clusters of size <= min_size, splits
    the budget across kept clusters proportionally (largest remainder), and
    runs the CRUST unit inside each. Falls back to plain ``crust_select``
    when every cluster is filtered or the pool is too small to cluster.
    """
    rows = _rows(g)
    n = rows.shape[0]
    if not 1 <= k <= n:
        raise BadKError(f"k={k} outside [1, {n}]")
    if min_size is None:
        min_size = default_min_cluster_size(n)
    if k_clusters is None:
        k_clusters = default_k_clusters(n, min_size)
    if k_clusters < 2:
        return crust_select(rows, k)

    clusters = spectral_cluster(rows, k_clusters, seed)
    kept = np.where(clusters.sizes > min_size)[0]
    clusters.kept = kept
    clusters.min_cluster_size = min_size
    if len(kept) == 0:
        warnings.warn("every cluster fell below the size threshold; "
                      "falling back to plain CRUST on the full pool")
        logger.warning("cosine_crust_select: all %d clusters <= %d samples; "
                       "plain CRUST fallback", k_clusters, min_size)
        return crust_select(rows, k)

    budgets = _proportional_budgets(clusters.sizes[kept], min(k, int(clusters.sizes[kept].sum())))
    ids = []
    provenance = []
    for cluster_id, budget in zip(kept, budgets):
        if budget == 0:
            continue
        members = np.where(clusters.labels == cluster_id)[0]
        sub = crust_select(rows[members], min(budget, len(members)))
        ids.extend(int(members[i]) for i in sub.ids)
        provenance.extend([int(cluster_id)] * len(sub.ids))
    ids = np.asarray(ids, dtype=np.int64)
    d = pairwise_dissimilarity(rows, "euclidean")
    return CoresetSelection(ids=ids,
                            objective_value=facility_location_value(d, ids),
                            cluster_provenance=np.asarray(provenance, dtype=np.int64))


def _proportional_budgets(sizes, total):
    """Largest-remainder rounding of total * size/sum; ties favor bigger clusters."""
    sizes = np.asarray(sizes, dtype=np.float64)
    exact = total * sizes / sizes.sum()
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        remainders = exact - base
        order = np.lexsort((np.arange(len(sizes)), -sizes, -remainders))
        base[order[:short]] += 1
    return base


def spectrum_report(g, split_ratio: float) -> SpectrumReport:
    """Singular spectrum of the gradient matrix and its information split.

    The split index is the smallest i with sigma_{i+1}/sigma_1 < split_ratio;
    if no such drop exists the split sits at the numerical rank.
    """
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must lie in (0, 1)")
    rows = _rows(g)
    sv = singular_values(rows)
    top = sv[0] if len(sv) else 0.0
    if top <= 0.0:
        return SpectrumReport(singular_values=sv, split_index=1,
                              split_ratio=split_ratio)
    rank = int(np.sum(sv > 1e-12 * top))
    split = rank
    for i in range(1, len(sv)):
        if sv[i] / top < split_ratio:
            split = i
            break
    split = max(1, min(split, rank))
    return SpectrumReport(singular_values=sv, split_index=split,
                          split_ratio=split_ratio)
