"""Greedy epsilon-ball clustering and the per-cluster moments behind the proxy total.

Rows are scanned in stored order.  The first row not yet assigned seeds a
new cluster made of every unassigned row within ``epsilon`` of it
(Euclidean distance in standardized coordinates).  Membership is decided
on standardized data; the centroid and moment sums are computed on the
data in *model* coordinates, because that is where the Taylor expansion
of the log-density lives.  With a single cluster containing rows ``C``
and centroid ``c = mean(z_k, k in C)``::

    first  = sum_k (z_k - c)
    B      = sum_k (z_k - c)(z_k - c)'

Both are independent of the parameter and are computed once.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from diffpmcmc.errors import ValidationError

FORMAT_MAGIC = b"DPMCCLU\x00"
FORMAT_VERSION = 1
INDEX_THRESHOLD = 50_000


@dataclass
class Standardization:
    """Per-column affine map ``(z - mean) / scale``; exempt columns use 0 and 1."""

    mean: np.ndarray
    scale: np.ndarray

    def apply(self, Z):
        return (np.asarray(Z, dtype=float) - self.mean) / self.scale

    @classmethod
    def identity(cls, d: int) -> "Standardization":
        return cls(np.zeros(d), np.ones(d))


def standardize(Z, exempt=(), names=None):
    """Center and scale every non-exempt column to mean 0 and sd 1.

    The sd uses the ``n - 1`` denominator.  A non-exempt column with zero
    variance is an error.  Returns ``(Z_std, Standardization)``.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ValidationError("standardize needs a non-empty 2-D array")
    d = Z.shape[1]
    mean = np.zeros(d)
    scale = np.ones(d)
    for j in range(d):
        if j in exempt:
            continue
        col = Z[:, j]
        sd = col.std(ddof=1) if col.shape[0] > 1 else 0.0
        if not sd > 0:
            label = names[j] if names is not None else f"column {j}"
            raise ValidationError(f"cannot standardize {label}: zero variance")
        mean[j] = col.mean()
        scale[j] = sd
    rec = Standardization(mean, scale)
    return rec.apply(Z), rec


@dataclass
class ClusterModel:
    """Clusters of one stratum of a dataset plus their precomputed moments.

    ``assignment`` has one entry per dataset row: the cluster index, or -1
    for rows outside this model (for example an exact stratum).
    """

    centroids: np.ndarray  # (N_C, p+1)
    counts: np.ndarray  # (N_C,) int64
    first_moments: np.ndarray  # (N_C, p+1)
    second_moments: np.ndarray  # (N_C, p+1, p+1)
    seeds: np.ndarray  # (N_C,) dataset row index of each seed
    assignment: np.ndarray  # (n_total,) int64
    epsilon: float
    standardization: Standardization

    @property
    def n_clusters(self) -> int:
        return int(self.counts.shape[0])

    @property
    def n(self) -> int:
        """Number of rows covered by the clustering."""
        return int(self.counts.sum())

    @property
    def n_total(self) -> int:
        return int(self.assignment.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    @property
    def rows(self) -> np.ndarray:
        """Dataset rows covered, ascending."""
        return np.flatnonzero(self.assignment >= 0)


def ball_partition(
    points,
    epsilon: float,
    *,
    index_threshold: int = INDEX_THRESHOLD,
    progress: Callable[[int, int], None] | None = None,
):
    """Greedy sequential epsilon-ball partition of ``points``.

    Returns ``(labels, seeds)`` where ``labels[i]`` is the cluster of row
    ``i`` and ``seeds[j]`` the row that seeded cluster ``j``.  Above
    ``index_threshold`` rows a k-d tree proposes candidates; membership is
    always decided by the same exact squared-distance test, so both paths
    give identical partitions.
    """
    P = np.ascontiguousarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    n = P.shape[0]
    eps2 = epsilon * epsilon
    labels = np.full(n, -1, dtype=np.int64)
    seeds = []

    if n <= index_threshold:
        remaining = np.arange(n)
        while remaining.size:
            i = remaining[0]
            d2 = ((P[remaining] - P[i]) ** 2).sum(axis=1)
            inside = d2 <= eps2
            labels[remaining[inside]] = len(seeds)
            seeds.append(i)
            remaining = remaining[~inside]
            if progress is not None:
                progress(len(seeds), n - remaining.size)
    else:
        tree = cKDTree(P)
        radius = epsilon * (1.0 + 1e-9) + 1e-300
        assigned = 0
        for i in range(n):
            if labels[i] >= 0:
                continue
            cand = np.asarray(tree.query_ball_point(P[i], radius), dtype=np.int64)
            cand = np.sort(cand[labels[cand] < 0])
            d2 = ((P[cand] - P[i]) ** 2).sum(axis=1)
            members = cand[d2 <= eps2]
            labels[members] = len(seeds)
            seeds.append(i)
            assigned += members.size
            if progress is not None:
                progress(len(seeds), assigned)
    return labels, np.asarray(seeds, dtype=np.int64)


def precompute_cluster_stats(labels, z, chunk_rows: int = 200_000):
    """Counts, centroids, first moments and ``B`` matrices per cluster.

    ``labels`` partitions the rows of ``z`` into clusters ``0..N_C-1``.
    Reductions run over rows in ascending order within each cluster.
    """
    labels = np.asarray(labels, dtype=np.int64)
    z = np.asarray(z, dtype=float)
    n_c = int(labels.max()) + 1 if labels.size else 0
    d = z.shape[1]
    order = np.argsort(labels, kind="stable")
    zs = z[order]
    ls = labels[order]
    counts = np.bincount(ls, minlength=n_c).astype(np.int64)
    if np.any(counts == 0):
        raise ValidationError("labels must cover 0..N_C-1 without gaps")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    centroids = np.add.reduceat(zs, starts, axis=0) / counts[:, None]
    dev = zs - centroids[ls]
    first = np.add.reduceat(dev, starts, axis=0)
    second = np.empty((n_c, d, d))
    # chunk over whole clusters so the (rows, d, d) outer-product buffer stays bounded
    j0 = 0
    while j0 < n_c:
        j1 = j0 + 1
        row_end = starts[j0] + counts[j0]
        while j1 < n_c and row_end + counts[j1] - starts[j0] <= chunk_rows:
            row_end += counts[j1]
            j1 += 1
        r0 = starts[j0]
        block = dev[r0:row_end]
        outer = block[:, :, None] * block[:, None, :]
        second[j0:j1] = np.add.reduceat(outer, starts[j0:j1] - r0, axis=0)
        j0 = j1
    return counts, centroids, first, second


def cluster(
    zs,
    epsilon: float,
    *,
    z=None,
    rows=None,
    dims=None,
    standardization: Standardization | None = None,
    index_threshold: int = INDEX_THRESHOLD,
    progress=None,
) -> ClusterModel:
    """Cluster rows of the standardized matrix ``zs``.

    Parameters
    ----------
    zs : (n_total, p+1) array
        Standardized data used for distances.
    epsilon : float
        Ball radius.
    z : array, optional
        Same rows in model coordinates, used for centroids and moments.
        Defaults to ``zs``.
    rows : int array, optional
        Dataset rows to cluster (scanned in ascending order).  Others get
        assignment -1.  Defaults to all rows.
    dims : int sequence, optional
        Columns entering the distance.  Defaults to all.
    """
    zs = np.asarray(zs, dtype=float)
    z = zs if z is None else np.asarray(z, dtype=float)
    if z.shape != zs.shape:
        raise ValidationError("standardized and model-coordinate data differ in shape")
    n_total, d = zs.shape
    rows = np.arange(n_total) if rows is None else np.sort(np.asarray(rows, dtype=np.int64))
    cols = np.arange(d) if dims is None else np.asarray(dims)
    assignment = np.full(n_total, -1, dtype=np.int64)
    if rows.size == 0:
        return ClusterModel(
            np.empty((0, d)), np.empty(0, np.int64), np.empty((0, d)), np.empty((0, d, d)),
            np.empty(0, np.int64), assignment, float(epsilon),
            standardization or Standardization.identity(d),
        )
    labels, seeds = ball_partition(
        zs[np.ix_(rows, cols)], epsilon, index_threshold=index_threshold, progress=progress
    )
    counts, centroids, first, second = precompute_cluster_stats(labels, z[rows])
    assignment[rows] = labels
    return ClusterModel(
        centroids=centroids,
        counts=counts,
        first_moments=first,
        second_moments=second,
        seeds=rows[seeds],
        assignment=assignment,
        epsilon=float(epsilon),
        standardization=standardization or Standardization.identity(d),
    )


def cluster_by_class(zs, classes, epsilon, *, z=None, rows=None, **kwargs) -> dict:
    """Cluster each response class separately on the covariate columns only.

    ``classes`` holds the class label per dataset row.  Returns a dict from
    class label to :class:`ClusterModel`; each centroid keeps its class label
    in column 0.  An empty class yields a model with zero clusters.
    """
    zs = np.asarray(zs, dtype=float)
    classes = np.asarray(classes)
    n_total = zs.shape[0]
    rows = np.arange(n_total) if rows is None else np.asarray(rows, dtype=np.int64)
    dims = np.arange(1, zs.shape[1])
    out = {}
    for label in np.unique(classes[rows]):
        sub = rows[classes[rows] == label]
        out[label.item()] = cluster(zs, epsilon, z=z, rows=sub, dims=dims, **kwargs)
    return out


def merge_models(models) -> ClusterModel:
    """Concatenate cluster models over disjoint rows of the same dataset."""
    models = list(models)
    if not models:
        raise ValidationError("nothing to merge")
    base = models[0]
    assignment = np.full(base.n_total, -1, dtype=np.int64)
    offset = 0
    for m in models:
        covered = m.assignment >= 0
        if np.any(assignment[covered] >= 0):
            raise ValidationError("cluster models overlap")
        assignment[covered] = m.assignment[covered] + offset
        offset += m.n_clusters
    return ClusterModel(
        centroids=np.concatenate([m.centroids for m in models]),
        counts=np.concatenate([m.counts for m in models]),
        first_moments=np.concatenate([m.first_moments for m in models]),
        second_moments=np.concatenate([m.second_moments for m in models]),
        seeds=np.concatenate([m.seeds for m in models]),
        assignment=assignment,
        epsilon=base.epsilon,
        standardization=base.standardization,
    )


def monitor_fraction(model: ClusterModel) -> float:
    """``N_C / n`` for the rows covered."""
    return model.n_clusters / model.n if model.n else 0.0


def update_clusters(model: ClusterModel, zs, z, new_rows, dims=None) -> ClusterModel:
    """Fold new rows into an existing clustering.

    ``zs``/``z`` hold all rows (old and new) in standardized and model
    coordinates.  Each new row joins the nearest existing seed within
    ``epsilon``; the rest are clustered greedily among themselves.  Moments
    of grown clusters are combined exactly with the pairwise update.
    """
    zs = np.asarray(zs, dtype=float)
    z = np.asarray(z, dtype=float)
    new_rows = np.sort(np.asarray(new_rows, dtype=np.int64))
    cols = np.arange(zs.shape[1]) if dims is None else np.asarray(dims)
    assignment = np.full(zs.shape[0], -1, dtype=np.int64)
    assignment[: model.n_total] = model.assignment
    if np.any(assignment[new_rows] >= 0):
        raise ValidationError("new rows are already clustered")
    eps2 = model.epsilon**2
    seed_pts = zs[np.ix_(model.seeds, cols)]
    joined = np.full(new_rows.size, -1, dtype=np.int64)
    for i, r in enumerate(new_rows):
        if model.n_clusters == 0:
            break
        d2 = ((seed_pts - zs[r, cols]) ** 2).sum(axis=1)
        j = int(np.argmin(d2))
        if d2[j] <= eps2:
            joined[i] = j

    centroids = model.centroids.copy()
    counts = model.counts.copy()
    first = model.first_moments.copy()
    second = model.second_moments.copy()
    for j in np.unique(joined[joined >= 0]):
        members = new_rows[joined == j]
        cb, zb, fb, bb = precompute_cluster_stats(np.zeros(members.size, np.int64), z[members])
        na, nb = counts[j], cb[0]
        n = na + nb
        c = (na * centroids[j] + nb * zb[0]) / n
        da, db = centroids[j] - c, zb[0] - c
        second[j] = (
            second[j] + np.outer(first[j], da) + np.outer(da, first[j]) + na * np.outer(da, da)
            + bb[0] + np.outer(fb[0], db) + np.outer(db, fb[0]) + nb * np.outer(db, db)
        )
        first[j] = first[j] + fb[0]
        centroids[j] = c
        counts[j] = n
        assignment[members] = j

    fresh = new_rows[joined < 0]
    seeds = model.seeds
    if fresh.size:
        extra = cluster(zs, model.epsilon, z=z, rows=fresh, dims=dims)
        off = model.n_clusters
        assignment[fresh] = extra.assignment[fresh] + off
        centroids = np.concatenate([centroids, extra.centroids])
        counts = np.concatenate([counts, extra.counts])
        first = np.concatenate([first, extra.first_moments])
        second = np.concatenate([second, extra.second_moments])
        seeds = np.concatenate([seeds, extra.seeds])
    return ClusterModel(centroids, counts, first, second, seeds, assignment,
                        model.epsilon, model.standardization)


# -- persistence -----------------------------------------------------------
# Layout (little-endian): magic[8]; int64 version, n, p, N_C, n_total;
# float64 epsilon; float64 mean[p+1], scale[p+1]; then per cluster
# int64 seed, N_j; float64 centroid[p+1], first[p+1], lower(B)[(p+1)(p+2)/2];
# then int64 assignment[n_total].

_HEADER = struct.Struct("<8s5qd")


def save_cluster_model(model: ClusterModel, path) -> None:
    d = model.dim
    tril = np.tril_indices(d)
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(FORMAT_MAGIC, FORMAT_VERSION, model.n, d - 1,
                              model.n_clusters, model.n_total, model.epsilon))
        fh.write(np.asarray(model.standardization.mean, "<f8").tobytes())
        fh.write(np.asarray(model.standardization.scale, "<f8").tobytes())
        rec = np.dtype([("seed", "<i8"), ("count", "<i8"), ("centroid", "<f8", d),
                        ("first", "<f8", d), ("tril", "<f8", len(tril[0]))])
        body = np.empty(model.n_clusters, dtype=rec)
        body["seed"] = model.seeds
        body["count"] = model.counts
        body["centroid"] = model.centroids
        body["first"] = model.first_moments
        body["tril"] = model.second_moments[:, tril[0], tril[1]]
        fh.write(body.tobytes())
        fh.write(np.asarray(model.assignment, "<i8").tobytes())


def load_cluster_model(path) -> ClusterModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated cluster file")
    magic, version, n, p, n_c, n_total, eps = _HEADER.unpack_from(raw, 0)
    if magic != FORMAT_MAGIC:
        raise ValidationError(f"{path}: not a cluster file")
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version {version}")
    d = p + 1
    off = _HEADER.size
    mean = np.frombuffer(raw, "<f8", d, off).copy()
    off += 8 * d
    scale = np.frombuffer(raw, "<f8", d, off).copy()
    off += 8 * d
    tril = np.tril_indices(d)
    rec = np.dtype([("seed", "<i8"), ("count", "<i8"), ("centroid", "<f8", d),
                    ("first", "<f8", d), ("tril", "<f8", len(tril[0]))])
    expected = off + rec.itemsize * n_c + 8 * n_total
    if len(raw) != expected:
        raise ValidationError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    body = np.frombuffer(raw, rec, n_c, off)
    off += rec.itemsize * n_c
    assignment = np.frombuffer(raw, "<i8", n_total, off).astype(np.int64)
    second = np.zeros((n_c, d, d))
    second[:, tril[0], tril[1]] = body["tril"]
    second[:, tril[1], tril[0]] = body["tril"]
    model = ClusterModel(
        centroids=body["centroid"].astype(float),
        counts=body["count"].astype(np.int64),
        first_moments=body["first"].astype(float),
        second_moments=second,
        seeds=body["seed"].astype(np.int64),
        assignment=assignment,
        epsilon=float(eps),
        standardization=Standardization(mean, scale),
    )
    if model.n != n:
        warnings.warn(f"{path}: header n={n} but counts sum to {model.n}")
    return model
