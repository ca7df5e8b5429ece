"""Patch matrices around seed points and ICP-based grouping of similar patches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import PointCloud
from .spatial import SeedSet, SpatialIndex

# Pairs processed per vectorised ICP block; bounds memory at roughly
# chunk * K * K * 3 doubles.
ICP_CHUNK = 1024


@dataclass(frozen=True)
class PatchMatrix:
    """K nearest points of a seed, rows ordered by distance to the seed."""

    seed_index: int
    point_indices: np.ndarray
    coords: np.ndarray

    @property
    def k(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def is_proper(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(R) - 1.0) <= tol
        )


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    distance: float
    correspondences: np.ndarray
    n_iter: int
    cost_history: Tuple[float, ...]
    degenerate: bool = False


@dataclass(frozen=True)
class GroupMember:
    """A patch aligned onto a group's reference.

    ``rows[i]`` is the member row matched to reference row i by ICP, and
    ``aligned`` is ``transform.apply(patch.coords[rows])``, so row i of every
    slice in the group describes the same surface location.
    """

    patch_index: int
    patch: PatchMatrix
    transform: RigidTransform
    icp_distance: float
    rows: np.ndarray
    aligned: np.ndarray

    @property
    def point_indices(self) -> np.ndarray:
        return self.patch.point_indices[self.rows]


@dataclass(frozen=True)
class PatchGroup:
    """A reference patch plus the ICP-aligned patches similar to it."""

    reference_index: int
    reference: PatchMatrix
    members: List[GroupMember] = field(default_factory=list)

    @property
    def size(self) -> int:
        return 1 + len(self.members)


# -- Phase I ---------------------------------------------------------------


def patch_arrays(
    index: SpatialIndex, seeds: SeedSet, k: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Neighbour indices (S, k) and coordinates (S, k, 3) for every seed."""
    seed_pts = index.points[seeds.indices]
    nbrs, _ = index.query(seed_pts, k)
    return nbrs, index.points[nbrs]


def extract_patches(
    cloud: PointCloud, index: SpatialIndex, seeds: SeedSet, k: int
) -> List[PatchMatrix]:
    """One patch matrix per seed, rows sorted by distance to the seed."""
    if k > len(cloud):
        raise ValueError(f"k={k} exceeds the number of points ({len(cloud)})")
    nbrs, coords = patch_arrays(index, seeds, k)
    return [
        PatchMatrix(int(s), nbrs[i], coords[i]) for i, s in enumerate(seeds.indices)
    ]


# -- ICP -------------------------------------------------------------------


def patch_distance(cost: np.ndarray, k: int) -> np.ndarray:
    """Average ICP distance compared against the similarity threshold.

    ``cost`` is the summed squared residual over K points; dividing by 3K
    gives the mean over the 3K scalar components.
    """
    return np.asarray(cost) / (3.0 * k)


def _kabsch(src: np.ndarray, dst: np.ndarray, degenerate: np.ndarray):
    """Batched least-squares rigid motion taking ``src`` rows onto ``dst`` rows.

    ``dst`` must already be centred at the origin.
    """
    mu_s = src.mean(axis=1)
    H = np.swapaxes(src - mu_s[:, None], 1, 2) @ dst
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    V[:, :, 2] *= d[:, None]
    R = V @ np.swapaxes(U, 1, 2)
    if degenerate.any():
        R[degenerate] = np.eye(3)
    t = -(R @ mu_s[:, :, None])[:, :, 0]
    return R, t


def _move(R: np.ndarray, t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Batched ``pts[b] @ R[b].T + t[b]``."""
    return pts @ np.swapaxes(R, 1, 2) + t[:, None]


def _gather(z: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Batched ``z[b, rows[b]]``; plain fancy indexing beats take_along_axis here."""
    return z[np.arange(len(z))[:, None], rows]


def _nearest(x: np.ndarray, x_m2: np.ndarray, z: np.ndarray):
    """For every target row, the closest moved row and the summed squared distance.

    ``x`` is the centred target and ``x_m2`` is ``-2 * x``. The |x|^2 term is
    constant along each row so it is left out of the argmin.
    """
    d2 = x_m2 @ np.swapaxes(z, 1, 2)
    d2 += np.sum(z * z, axis=2)[:, None, :]
    corr = np.argmin(d2, axis=2)
    diff = x - _gather(z, corr)
    return corr, np.sum(diff * diff, axis=(1, 2))


def _is_degenerate(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=1, keepdims=True)
    gram = np.swapaxes(centered, 1, 2) @ centered
    ev = np.linalg.eigvalsh(gram)
    return ev[:, 1] <= 1e-20 * ev[:, 2] + 1e-300


def icp_align_batch(
    sources: np.ndarray, targets: np.ndarray, max_iters: int = 30, tol: float = 1e-8
):
    """Vectorised point-to-point ICP aligning each source patch onto its target.

    The first estimate uses row-order correspondence, which is exact for
    patches related by a rigid motion since rows are sorted by distance to
    the seed. Afterwards each target row is matched to its nearest moved
    source row and the rigid motion is re-solved in closed form. A pair stops
    once its cost improves by less than ``tol`` or its matching stops
    changing.

    Returns ``(R, t, cost, corr, n_iter, history, degenerate)`` where
    ``history`` is a (B, max_iters + 1) array padded with NaN.
    """
    Y = np.asarray(sources, dtype=np.float64)
    X = np.asarray(targets, dtype=np.float64)
    if Y.shape != X.shape or Y.ndim != 3 or Y.shape[2] != 3:
        raise ValueError(f"source/target shapes differ or are not (B, K, 3): {Y.shape}, {X.shape}")
    B = Y.shape[0]
    degenerate = _is_degenerate(Y) | _is_degenerate(X)
    # solve in the frame of the target centroid and shift back at the end
    centre = X.mean(axis=1)
    Xc = X - centre[:, None]
    R, t = _kabsch(Y, Xc, degenerate)
    corr, cost = _nearest(Xc, -2.0 * Xc, _move(R, t, Y))

    history = np.full((B, max_iters + 1), np.nan)
    history[:, 0] = cost
    n_iter = np.zeros(B, dtype=np.int64)
    # Working copies hold only the pairs still iterating. A pair whose matching
    # equals the one its motion was solved from would repeat the same step.
    ia = np.nonzero(np.any(corr != np.arange(corr.shape[1]), axis=1))[0]
    Ya, Xa, Xm2, dega = Y[ia], Xc[ia], -2.0 * Xc[ia], degenerate[ia]
    corr_a, cost_a = corr[ia], cost[ia]
    for it in range(1, max_iters + 1):
        if ia.size == 0:
            break
        src = _gather(Ya, corr_a)
        Rn, tn = _kabsch(src, Xa, dega)
        cn, costn = _nearest(Xa, Xm2, _move(Rn, tn, Ya))
        improved = costn <= cost_a
        gain = np.where(improved, cost_a - costn, 0.0)
        repeats = np.all(cn == corr_a, axis=1)
        upd = ia[improved]
        R[upd], t[upd], corr[upd], cost[upd] = Rn[improved], tn[improved], cn[improved], costn[improved]
        corr_a[improved], cost_a[improved] = cn[improved], costn[improved]
        history[ia, it] = cost_a
        n_iter[ia] = it
        going = (gain >= tol) & ~repeats
        if not going.all():
            ia, Ya, Xa, Xm2, dega = ia[going], Ya[going], Xa[going], Xm2[going], dega[going]
            corr_a, cost_a = corr_a[going], cost_a[going]
    return R, t + centre, cost, corr, n_iter, history, degenerate


def icp_align(
    source: PatchMatrix, target: PatchMatrix, max_iters: int = 30, tol: float = 1e-8
) -> IcpResult:
    """Align ``source`` onto ``target``; ``distance`` is the final summed squared cost."""
    if source.k != target.k:
        raise ValueError("patches must have the same number of rows")
    if source.k < 3:
        raise ValueError("ICP needs at least 3 points per patch")
    R, t, cost, corr, n_iter, hist, degen = icp_align_batch(
        source.coords[None], target.coords[None], max_iters, tol
    )
    h = hist[0]
    return IcpResult(
        RigidTransform(R[0], t[0]),
        float(cost[0]),
        corr[0],
        int(n_iter[0]),
        tuple(float(v) for v in h[~np.isnan(h)]),
        bool(degen[0]),
    )


# -- Phase II --------------------------------------------------------------


def candidate_lists(seed_points: np.ndarray, n_reg: int) -> np.ndarray:
    """For every seed, the ``n_reg`` other seeds nearest to it (ties by index).

    Returns an (S, min(n_reg, S - 1)) array of patch indices.
    """
    S = len(seed_points)
    width = min(n_reg, S - 1)
    if width <= 0:
        return np.zeros((S, 0), dtype=np.int64)
    nbrs, _ = SpatialIndex(seed_points).query(seed_points, width + 1)
    keep = nbrs != np.arange(S)[:, None]
    # self is always among the width + 1 results unless duplicates push it out
    out = np.empty((S, width), dtype=np.int64)
    for s in range(S):
        row = nbrs[s][keep[s]]
        out[s] = row[:width]
    return out


@dataclass
class GroupArrays:
    """Grouping results for many references in flat form.

    ``offsets[r]:offsets[r + 1]`` slices the member arrays of reference r.
    ``rows`` and ``aligned`` follow :class:`GroupMember`.
    """

    offsets: np.ndarray
    members: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    distances: np.ndarray
    rows: np.ndarray
    aligned: np.ndarray

    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets) + 1


def group_all(
    coords: np.ndarray,
    candidates: np.ndarray,
    delta_sim: float,
    max_iters: int = 30,
    tol: float = 1e-8,
    references: Optional[Sequence[int]] = None,
) -> GroupArrays:
    """Batched grouping: ICP every (reference, candidate) pair and keep the similar ones.

    ``coords`` is (S, K, 3); ``candidates`` is (S, W). Members of each group
    are ordered by ascending ICP distance (stable in candidate order).
    """
    S, K, _ = coords.shape
    refs = np.arange(S) if references is None else np.asarray(references, dtype=np.int64)
    W = candidates.shape[1]
    ref_of_pair = np.repeat(refs, W)
    cand_of_pair = candidates[refs].ravel()
    P = ref_of_pair.size

    R = np.empty((P, 3, 3))
    t = np.empty((P, 3))
    cost = np.empty(P)
    corr = np.empty((P, K), dtype=np.int64)
    for lo in range(0, P, ICP_CHUNK):
        hi = min(P, lo + ICP_CHUNK)
        Rc, tc, cc, co, *_ = icp_align_batch(
            coords[cand_of_pair[lo:hi]], coords[ref_of_pair[lo:hi]], max_iters, tol
        )
        R[lo:hi], t[lo:hi], cost[lo:hi], corr[lo:hi] = Rc, tc, cc, co

    ok = patch_distance(cost, K) < delta_sim
    offsets = np.zeros(len(refs) + 1, dtype=np.int64)
    keep_pairs = []
    for r in range(len(refs)):
        sel = np.arange(r * W, (r + 1) * W)
        sel = sel[ok[sel]]
        sel = sel[np.argsort(cost[sel], kind="stable")]
        keep_pairs.append(sel)
        offsets[r + 1] = offsets[r] + sel.size
    keep = np.concatenate(keep_pairs) if keep_pairs else np.zeros(0, dtype=np.int64)
    members = cand_of_pair[keep]
    rows = corr[keep]
    matched = np.take_along_axis(coords[members], rows[:, :, None], axis=1)
    aligned = _move(R[keep], t[keep], matched)
    return GroupArrays(offsets, members, R[keep], t[keep], cost[keep], rows, aligned)


def group_similar(
    patches: Sequence[PatchMatrix],
    reference_index: int,
    delta_sim: float,
    n_reg: int,
    icp_max_iters: int = 30,
    icp_tol: float = 1e-8,
    candidates: Optional[np.ndarray] = None,
) -> PatchGroup:
    """Group of patches similar to ``patches[reference_index]``.

    Candidates are the ``n_reg`` patches whose seeds are closest to the
    reference seed (or row ``reference_index`` of ``candidates``). A candidate
    joins when its ICP distance divided by 3K is strictly below ``delta_sim``.
    """
    if not 0 <= reference_index < len(patches):
        raise IndexError("reference_index out of range")
    if n_reg < 1:
        raise ValueError("n_reg must be at least 1")
    coords = np.stack([p.coords for p in patches])
    cand = np.zeros((len(patches), 0), dtype=np.int64)
    if candidates is None:
        seed_pts = coords[:, 0, :]
        d = np.sqrt(np.sum((seed_pts - seed_pts[reference_index]) ** 2, axis=1))
        order = np.lexsort((np.arange(len(patches)), d))
        order = order[order != reference_index][:n_reg]
        cand = np.zeros((len(patches), len(order)), dtype=np.int64)
        cand[reference_index] = order
    else:
        cand = np.asarray(candidates, dtype=np.int64)[:, :n_reg]
    ga = group_all(coords, cand, delta_sim, icp_max_iters, icp_tol, [reference_index])
    members = [
        GroupMember(
            int(m),
            patches[m],
            RigidTransform(ga.rotations[j], ga.translations[j]),
            float(ga.distances[j]),
            ga.rows[j],
            ga.aligned[j],
        )
        for j, m in enumerate(ga.members)
    ]
    return PatchGroup(reference_index, patches[reference_index], members)
