"""Geometric evaluation: Chamfer and Earth Mover's distances, plus the
set-level fidelity (MMD) and diversity (COV) scores built on them.

Conventions, stated so the numbers are interpretable:
  - chamfer: mean of squared nearest-neighbor distances in both directions,
    summed (squared is the default; pass squared=False for euclidean).
  - emd: mean euclidean cost of the optimal 1-1 assignment; exact Hungarian
    solve up to ``exact_limit`` points, epsilon-scaled auction above it
    (total cost within n * auction_tol of optimal).
  - mmd(gen, ref): mean over reference clouds of the distance to their
    nearest generated cloud.
  - cov(gen, ref): percentage of reference clouds claimed as nearest
    neighbor by at least one generated cloud.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import VoxCityError
from .mesh import Mesh, extract_mesh

EXACT_EMD_LIMIT = 256
AUCTION_TOL = 1e-3  # per-point optimality slack of the auction fallback


def _positions(cloud):
    return cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud)


def chamfer(a, b, squared: bool = True) -> float:
    """Symmetric nearest-neighbor distance via kd-trees."""
    pa, pb = _positions(a), _positions(b)
    if len(pa) == 0 or len(pb) == 0:
        raise VoxCityError("chamfer needs non-empty clouds")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    if squared:
        return float((d_ab ** 2).mean() + (d_ba ** 2).mean())
    return float(d_ab.mean() + d_ba.mean())


def hungarian(cost: np.ndarray):
    """Exact square-matrix assignment (shortest augmenting paths with
    potentials, O(n^3)). Returns (row_to_col, total_cost)."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n != m:
        raise VoxCityError("hungarian expects a square cost matrix")
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)      # p[j]: row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1, :][free[1:]] - u[i0] - v[1:][free[1:]]
            idx = np.flatnonzero(free)
            better = cur < minv[idx]
            minv[idx[better]] = cur[better]
            way[idx[better]] = j0
            j1 = idx[np.argmin(minv[idx])]
            delta = minv[j1]
            minv[idx] -= delta
            u[p[used]] += delta
            v[used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            p[j0] = p[way[j0]]
            j0 = way[j0]
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    total = float(cost[np.arange(n), row_to_col].sum())
    return row_to_col, total


def auction_assignment(cost: np.ndarray, tol: float = AUCTION_TOL):
    """Epsilon-scaled auction; final assignment cost is within n * tol of
    the optimum (standard auction bound with integer-free costs)."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    benefit = -cost
    eps = max(benefit.max() - benefit.min(), tol) / 2.0
    owner = np.full(n, -1, dtype=np.int64)   # object -> bidder
    assigned = np.full(n, -1, dtype=np.int64)
    prices = np.zeros(n)
    while True:
        unassigned = np.flatnonzero(assigned < 0)
        if unassigned.size == 0:
            if eps <= tol:
                break
            eps = max(eps / 4.0, tol)
            owner[:] = -1
            assigned[:] = -1
            continue
        for i in unassigned:
            values = benefit[i] - prices
            j = int(np.argmax(values))
            top = values[j]
            values[j] = -np.inf
            second = values.max() if n > 1 else top - eps
            bid = prices[j] + (top - second) + eps
            prev = owner[j]
            if prev >= 0:
                assigned[prev] = -1
            owner[j] = i
            assigned[i] = j
            prices[j] = bid
    return assigned, float(cost[np.arange(n), assigned].sum())


def emd(a, b, exact_limit: int = EXACT_EMD_LIMIT) -> float:
    """Mean matched euclidean distance under the optimal 1-1 assignment."""
    pa, pb = _positions(a), _positions(b)
    if len(pa) != len(pb):
        raise VoxCityError(f"emd needs equal sizes, got {len(pa)} vs {len(pb)}")
    n = len(pa)
    if n == 0:
        raise VoxCityError("emd needs non-empty clouds")
    diff = pa[:, None, :] - pb[None, :, :]
    cost = np.sqrt((diff ** 2).sum(axis=2))
    if n <= exact_limit:
        _, total = hungarian(cost)
    else:
        _, total = auction_assignment(cost)
    return total / n


def _pairwise(gen_set, ref_set, dist):
    d = np.empty((len(gen_set), len(ref_set)))
    for gi, g in enumerate(gen_set):
        for ri, r in enumerate(ref_set):
            d[gi, ri] = dist(g, r)
    return d


def mmd(gen_set, ref_set, dist=chamfer) -> float:
    """Mean over references of the distance to the nearest generated cloud."""
    if not gen_set or not ref_set:
        raise VoxCityError("mmd needs non-empty sets")
    d = _pairwise(gen_set, ref_set, dist)
    return float(d.min(axis=0).mean())


def cov(gen_set, ref_set, dist=chamfer) -> float:
    """Percentage of references claimed as nearest neighbor by some sample."""
    if not gen_set or not ref_set:
        raise VoxCityError("cov needs non-empty sets")
    d = _pairwise(gen_set, ref_set, dist)
    claimed = set(np.argmin(d, axis=1).tolist())
    return 100.0 * len(claimed) / len(ref_set)


def sample_surface(source, n: int = 10_000, seed: int = 0) -> PointCloud:
    """Area-weighted uniform sampling of a mesh or a grid's boundary surface.

    Colors are barycentric interpolations of vertex colors when present.
    """
    mesh = source if isinstance(source, Mesh) else extract_mesh(source)
    rng = np.random.default_rng(seed)
    tri = mesh.vertices[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    if areas.sum() <= 0:
        raise VoxCityError("surface has zero area")
    pick = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=n))[:, None]
    r2 = rng.uniform(size=n)[:, None]
    w0, w1, w2 = 1 - r1, r1 * (1 - r2), r1 * r2
    chosen = tri[pick]
    pos = w0 * chosen[:, 0] + w1 * chosen[:, 1] + w2 * chosen[:, 2]
    colors = None
    if mesh.vertex_colors is not None:
        vc = mesh.vertex_colors[mesh.faces][pick]
        colors = w0 * vc[:, 0] + w1 * vc[:, 1] + w2 * vc[:, 2]
    normals = cross[pick] / np.linalg.norm(cross[pick], axis=1, keepdims=True)
    return PointCloud(pos, colors=colors, normals=normals)
