"""Instance segmentation from voxel embeddings.

Voxels below the occupancy threshold are discarded, the rest are grouped with
k-means in embedding space. When the object count is unknown the scene is
oversegmented and adjacent clusters are merged greedily by the ratio of shared
faces to the larger cluster's volume.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

OCCUPANCY_THRESHOLD = 0.5
MERGE_STOP_RATIO = Fraction(3, 2)
MAX_MATCH_CLUSTERS = 6


class ClusterError(ValueError):
    pass


@dataclass
class Clustering:
    assignment: np.ndarray  # (M, M, M) int; 0 = discarded, 1..k = cluster id
    k: int
    merge_log: list[dict] = field(default_factory=list)

    def members(self, cid: int) -> np.ndarray:
        return np.flatnonzero(self.assignment.ravel() == cid)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment.ravel(), minlength=self.k + 1)[1:]


def _relabel(assignment: np.ndarray) -> tuple[np.ndarray, int]:
    """Compact ids to 1..k preserving the order of first appearance by id value."""
    ids = [int(v) for v in np.unique(assignment) if v > 0]
    lut = np.zeros(int(assignment.max()) + 1 if assignment.size else 1, dtype=np.int64)
    for new, old in enumerate(ids, start=1):
        lut[old] = new
    return lut[assignment], len(ids)


# --- k-means -------------------------------------------------------------------

def _sqdist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def _plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        if tot > 0:
            i = int(rng.choice(n, p=d2 / tot))
        else:
            i = int(rng.integers(n))
        centers.append(points[i])
        d2 = np.minimum(d2, ((points - points[i]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    k = len(centers)
    prev = None
    for _ in range(max_iter):
        d2 = _sqdist(points, centers)
        labels = d2.argmin(axis=1)
        counts = np.bincount(labels, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            # re-seed at the point farthest from its current center
            own = d2[np.arange(len(points)), labels]
            far = int(own.argmax())
            labels[far] = empty
            d2[far] = 0.0
            counts = np.bincount(labels, minlength=k)
        for c in range(k):
            centers[c] = points[labels == c].mean(axis=0)
        inertia = float(((points - centers[labels]) ** 2).sum())
        if prev is not None and abs(prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    d2 = _sqdist(points, centers)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    return labels, centers, inertia


def kmeans_points(
    points: np.ndarray,
    k: int,
    seed: int,
    n_init: int = 10,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, float]:
    """k-means++ seeded Lloyd iterations; best of `n_init` restarts.

    Returns (labels in 0..k-1, centers, inertia). Deterministic given seed.
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ClusterError("k must be at least 1")
    if len(points) < k:
        raise ClusterError(f"{len(points)} points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, centers, inertia = _lloyd(points, _plusplus(points, k, rng), max_iter, tol)
        if best is None or inertia < best[2]:
            best = (labels, centers.copy(), inertia)
    return best


def kmeans(
    embeddings: np.ndarray,
    active: np.ndarray,
    k: int,
    seed: int,
    n_init: int = 10,
) -> Clustering:
    """Cluster the active voxels of an (E, M, M, M) embedding field."""
    active = np.asarray(active, dtype=bool)
    E = embeddings.shape[0]
    flat = np.flatnonzero(active.ravel())
    if len(flat) < k:
        raise ClusterError(f"{len(flat)} active voxels cannot form {k} clusters")
    pts = embeddings.reshape(E, -1)[:, flat].T
    labels, _, _ = kmeans_points(pts, k, seed, n_init=n_init)
    assignment = np.zeros(active.size, dtype=np.int64)
    assignment[flat] = labels + 1
    assignment, kk = _relabel(assignment.reshape(active.shape))
    return Clustering(assignment, kk)


def segment(occupancy: np.ndarray, embeddings: np.ndarray, k: int, seed: int) -> Clustering:
    return kmeans(embeddings, occupancy >= OCCUPANCY_THRESHOLD, k, seed)


# --- oversegment and merge -------------------------------------------------------

def adjacency_counts(assignment: np.ndarray, k: int) -> np.ndarray:
    """Symmetric (k+1, k+1) counts of 6-connected face contacts between cluster ids."""
    A = np.zeros((k + 1, k + 1), dtype=np.int64)
    for axis in range(3):
        a = np.moveaxis(assignment, axis, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        keep = (lo > 0) & (hi > 0) & (lo != hi)
        np.add.at(A, (lo[keep], hi[keep]), 1)
    return A + A.T


def merge_ratio(assignment: np.ndarray, a: int, b: int) -> Fraction:
    k = int(assignment.max())
    A = adjacency_counts(assignment, k)
    sizes = np.bincount(assignment.ravel(), minlength=k + 1)
    return Fraction(int(A[a, b]), int(max(sizes[a], sizes[b])))


def merge_clusters(c: Clustering, stop_ratio: Fraction = MERGE_STOP_RATIO) -> Clustering:
    """Greedy merging of the pair with the largest contact ratio until it drops below `stop_ratio`.

    Ratio R(a, b) = face contacts between a and b / size of the larger cluster.
    Ties go to the smaller (a, b) id pair. Merged ids keep the smaller id.
    """
    assignment = c.assignment.copy()
    log: list[dict] = []
    while True:
        ids = [int(v) for v in np.unique(assignment) if v > 0]
        if len(ids) < 2:
            break
        k = max(ids)
        A = adjacency_counts(assignment, k)
        sizes = np.bincount(assignment.ravel(), minlength=k + 1)
        best, best_pair = None, None
        for a, b in itertools.combinations(ids, 2):
            if A[a, b] == 0:
                r = Fraction(0)
            else:
                r = Fraction(int(A[a, b]), int(max(sizes[a], sizes[b])))
            if best is None or r > best:
                best, best_pair = r, (a, b)
        log.append({"pair": best_pair, "ratio": float(best), "merged": best >= stop_ratio})
        if best < stop_ratio:
            break
        a, b = best_pair
        assignment[assignment == b] = a
    assignment, kk = _relabel(assignment)
    return Clustering(assignment, kk, log)


# --- classification and matching ---------------------------------------------------

def cluster_mean_logits(c: Clustering, logits: np.ndarray) -> np.ndarray:
    """(k, C) mean logit vector of each cluster."""
    C = logits.shape[0]
    flat = logits.reshape(C, -1)
    out = np.zeros((c.k, C))
    for cid in range(1, c.k + 1):
        out[cid - 1] = flat[:, c.members(cid)].mean(axis=1)
    return out


def classify_clusters(c: Clustering, logits: np.ndarray) -> list[int]:
    """Argmax of each cluster's mean logits; ties resolve to the lowest category."""
    if c.k == 0:
        return []
    return [int(np.argmax(row)) for row in cluster_mean_logits(c, logits)]


def iou_matrix(assignment: np.ndarray, gt_instance: np.ndarray, k: int, k_gt: int) -> np.ndarray:
    """(k, k_gt) IoU between predicted clusters and groundtruth instances."""
    a = assignment.ravel()
    g = np.asarray(gt_instance).ravel()
    inter = np.zeros((k + 1, k_gt + 1), dtype=np.int64)
    np.add.at(inter, (a, g), 1)
    size_a = inter.sum(axis=1)
    size_g = inter.sum(axis=0)
    I = inter[1:, 1:].astype(np.float64)
    U = size_a[1:, None] + size_g[None, 1:] - I
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(U > 0, I / U, 0.0)


def iou_fractions(assignment: np.ndarray, gt_instance: np.ndarray, k: int, k_gt: int) -> list[list[Fraction]]:
    """Exact rational version of `iou_matrix`, so matching totals compare without rounding."""
    a = assignment.ravel()
    g = np.asarray(gt_instance).ravel()
    inter = np.zeros((k + 1, k_gt + 1), dtype=np.int64)
    np.add.at(inter, (a, g), 1)
    size_a = inter.sum(axis=1)
    size_g = inter.sum(axis=0)
    out = []
    for r in range(1, k + 1):
        row = []
        for c in range(1, k_gt + 1):
            union = int(size_a[r] + size_g[c] - inter[r, c])
            row.append(Fraction(int(inter[r, c]), union) if union else Fraction(0))
        out.append(row)
    return out


@dataclass
class Matching:
    pairs: list[tuple[int, int]]  # (cluster id, gt id), both 1-based
    ious: list[float]
    mean_iou: float  # over groundtruth objects, unmatched count as zero


def best_injection(M) -> tuple[list[tuple[int, int]], float]:
    """Exhaustive one-to-one assignment maximizing the total of M (rows x cols).

    M may hold floats or Fractions; ties keep the first permutation found.
    """
    M = np.asarray(M, dtype=object)
    k, k_gt = M.shape
    best_total, best_pairs = -1, []
    if k >= k_gt:
        for rows in itertools.permutations(range(k), k_gt):
            tot = sum(M[r, g] for g, r in enumerate(rows))
            if tot > best_total:
                best_total, best_pairs = tot, [(r, g) for g, r in enumerate(rows)]
    else:
        for cols in itertools.permutations(range(k_gt), k):
            tot = sum(M[r, g] for r, g in enumerate(cols))
            if tot > best_total:
                best_total, best_pairs = tot, [(r, g) for r, g in enumerate(cols)]
    return best_pairs, max(best_total, 0)


def match_to_groundtruth(c: Clustering, gt_instance: np.ndarray, k_gt: int) -> Matching:
    if c.k > MAX_MATCH_CLUSTERS or k_gt > MAX_MATCH_CLUSTERS:
        raise ClusterError(f"matching supports at most {MAX_MATCH_CLUSTERS} clusters per side")
    if k_gt == 0:
        return Matching([], [], 1.0 if c.k == 0 else 0.0)
    if c.k == 0:
        return Matching([], [], 0.0)
    M = iou_fractions(c.assignment, gt_instance, c.k, k_gt)
    pairs, total = best_injection(M)
    return Matching(
        pairs=[(r + 1, g + 1) for r, g in pairs],
        ious=[float(M[r][g]) for r, g in pairs],
        mean_iou=float(Fraction(total) / k_gt),
    )


def amodal_boxes(c: Clustering, ref_rotation: np.ndarray, pose, cam) -> dict[int, tuple[float, float, float, float]]:
    """Pixel bounding box (u0, v0, u1, v1) of each cluster's projected voxel centers."""
    from .lift import grid_in_world

    M = c.assignment.shape[0]
    frame = type(pose)(np.asarray(ref_rotation), np.zeros(3))
    world = grid_in_world(M, frame).reshape(-1, 3)
    u, v, _ = cam.project(pose.apply(world))
    size = cam.image_size
    out = {}
    for cid in range(1, c.k + 1):
        m = c.members(cid)
        if m.size == 0:
            continue
        out[cid] = (
            float(np.clip(u[m].min(), 0, size)),
            float(np.clip(v[m].min(), 0, size)),
            float(np.clip(u[m].max(), 0, size)),
            float(np.clip(v[m].max(), 0, size)),
        )
    return out
