"""Tucker-decomposition point cloud denoiser (patch grouping, HOOI, thresholding, aggregation)."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from .geometry import PointCloud
from .patch import PatchGroup, candidate_lists, group_all, patch_arrays
from .spatial import (
    SeedSet,
    auto_seed_radius,
    auto_voxel_size,
    build_index,
    coverage_check,
    select_seeds,
    select_seeds_radius,
)
from .tensor import denoise_batch, hard_threshold_core, hooi, reconstruct

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "TUDE_CONFIG"

# Noise level -> patch size anchors used in published experiments.
K_ANCHORS: Tuple[Tuple[float, int], ...] = ((0.04, 19), (0.05, 21), (0.08, 26), (0.1, 35))
DEFAULT_K = 21

# Reference patches handled per grouping/denoising block.
GROUP_CHUNK = 256


def pick_k_for_sigma(sigma: float, scale: float = 1.0) -> int:
    """Patch size for noise level ``sigma`` measured in units of ``scale``.

    Piecewise-linear through the anchors, clamped to [19, 35] outside them,
    rounded half up.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if not scale > 0:
        raise ValueError("scale must be positive")
    xs = [s for s, _ in K_ANCHORS]
    ys = [k for _, k in K_ANCHORS]
    return int(math.floor(float(np.interp(sigma / scale, xs, ys)) + 0.5))


@dataclass(frozen=True)
class DenoiseConfig:
    """Parameters of the denoiser.

    ``k`` left as ``None`` is derived from ``sigma`` (see
    :func:`pick_k_for_sigma`) or falls back to 21. ``seed_size`` left as
    ``None`` is bisected so that the seed count is ``seed_ratio * N``.
    """

    k: Optional[int] = None
    sigma: Optional[float] = None
    sigma_scale: float = 1.0
    delta_sim: float = 1.0
    n_reg: int = 20
    ranks: Tuple[int, int, int] = (3, 3, 3)
    delta_thre: float = 0.1
    seed_ratio: float = 0.48
    seed_method: str = "radius"
    seed_size: Optional[float] = None
    ensure_coverage: bool = True
    center_patches: bool = True
    icp_max_iters: int = 30
    icp_tol: float = 1e-8
    hooi_max_iters: int = 50
    hooi_tol: float = 1e-8
    # one HOOI start per group; more escape poor local optima at a cost
    hooi_starts: int = 1
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if len(self.ranks) != 3 or min(self.ranks) < 1:
            raise ValueError(f"ranks must be three positive integers, got {self.ranks}")
        k = self.resolved_k()
        if k < max(self.ranks[0], 4):
            raise ValueError(f"K={k} must be at least max(r1, 4)")
        if not 0 <= self.delta_thre <= 1:
            raise ValueError("delta_thre must lie in [0, 1]")
        if self.n_reg < 1:
            raise ValueError("n_reg must be at least 1")
        if not 0 < self.seed_ratio <= 1:
            raise ValueError("seed_ratio must lie in (0, 1]")
        if self.seed_method not in ("radius", "voxel"):
            raise ValueError(f"unknown seed_method {self.seed_method!r}")
        if self.delta_sim < 0:
            raise ValueError("delta_sim must be non-negative")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.hooi_starts < 1:
            raise ValueError("hooi_starts must be at least 1")

    def resolved_k(self) -> int:
        if self.k is not None:
            return int(self.k)
        if self.sigma is not None:
            return pick_k_for_sigma(self.sigma, self.sigma_scale)
        return DEFAULT_K

    def replace(self, **changes) -> "DenoiseConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, object]:
        d = dataclasses.asdict(self)
        d["ranks"] = list(self.ranks)
        return d

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], base: Optional["DenoiseConfig"] = None):
        unknown = set(values) - set(cls.field_names())
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return dataclasses.replace(base or cls(), **dict(values))


def load_config(path: Optional[os.PathLike] = None, **overrides) -> DenoiseConfig:
    """Defaults, then the YAML file (``path`` or ``$TUDE_CONFIG``), then ``overrides``.

    The file is a flat mapping whose keys are :class:`DenoiseConfig` fields.
    """
    cfg = DenoiseConfig()
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        cfg = DenoiseConfig.from_mapping(data, cfg)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = DenoiseConfig.from_mapping(overrides, cfg)
    return cfg


@dataclass
class DenoiseReport:
    k: int = 0
    n_points: int = 0
    n_seeds: int = 0
    seed_size: float = 0.0
    groups_formed: int = 0
    groups_denoised: int = 0
    groups_skipped_small: int = 0
    mean_group_size: float = 0.0
    points_covered: int = 0
    points_uncovered: int = 0
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    def summary(self) -> str:
        t = ", ".join(f"{k}={v:.2f}s" for k, v in self.timings.items())
        return (
            f"K={self.k} points={self.n_points} seeds={self.n_seeds} "
            f"groups={self.groups_formed} denoised={self.groups_denoised} "
            f"skipped={self.groups_skipped_small} mean_M={self.mean_group_size:.2f} "
            f"uncovered={self.points_uncovered} [{t}]"
        )


class Accumulator:
    """Per-point running sums and estimate counts."""

    def __init__(self, n: int):
        self.sum = np.zeros((n, 3))
        self.count = np.zeros(n, dtype=np.int64)

    def add(self, indices: np.ndarray, values: np.ndarray) -> None:
        indices = np.asarray(indices).ravel()
        values = np.asarray(values).reshape(-1, 3)
        n = len(self.count)
        self.count += np.bincount(indices, minlength=n)
        for c in range(3):
            self.sum[:, c] += np.bincount(indices, weights=values[:, c], minlength=n)

    def merge(self, other: "Accumulator") -> None:
        self.sum += other.sum
        self.count += other.count

    def result(self, fallback: np.ndarray) -> np.ndarray:
        out = np.array(fallback, dtype=np.float64, copy=True)
        hit = self.count > 0
        out[hit] = self.sum[hit] / self.count[hit, None]
        return out


# -- Phase III -------------------------------------------------------------


def stack_group(group: PatchGroup) -> np.ndarray:
    """Patch tensor of shape (K, 3, M): reference first, then aligned members."""
    slices = [group.reference.coords] + [m.aligned for m in group.members]
    return np.stack(slices, axis=2)


def should_denoise(shape: Sequence[int], ranks: Sequence[int]) -> bool:
    """Size guard: patch size and group size must exceed r1 and r3.

    The coordinate mode always has extent 3, so it only needs ``r2 <= 3``.
    """
    K, n, M = shape
    return K > ranks[0] and ranks[1] <= n and M > ranks[2]


def denoise_group(A: np.ndarray, config: DenoiseConfig) -> np.ndarray:
    """Tucker-compress ``A``, hard-threshold the core and multiply back.

    With ``config.center_patches`` the tensor is first shifted so the
    reference slice has zero mean, and shifted back afterwards. Tensors
    failing the size guard are returned unchanged.
    """
    if not should_denoise(A.shape, config.ranks):
        return A
    offset = A[:, :, 0].mean(axis=0) if config.center_patches else np.zeros(3)
    model = hooi(A - offset[None, :, None], config.ranks, config.hooi_max_iters, config.hooi_tol,
                 config.hooi_starts)
    return reconstruct(hard_threshold_core(model, config.delta_thre)) + offset[None, :, None]


# -- Phase IV --------------------------------------------------------------


def aggregate(
    cloud: PointCloud, groups: Iterable[Tuple[PatchGroup, np.ndarray]]
) -> PointCloud:
    """Move each denoised slice back through its inverse transform and average per point.

    Points without any estimate keep their input position.
    """
    acc = Accumulator(len(cloud))
    for group, tensor in groups:
        K = group.reference.k
        if tensor.shape != (K, 3, group.size):
            raise ValueError(
                f"tensor shape {tensor.shape} does not match group of size {group.size} with K={K}"
            )
        acc.add(group.reference.point_indices, tensor[:, :, 0])
        for p, member in enumerate(group.members, start=1):
            acc.add(member.point_indices, member.transform.apply_inverse(tensor[:, :, p]))
    return cloud.with_points(acc.result(cloud.points))


# -- Pipeline --------------------------------------------------------------


def choose_seeds(cloud: PointCloud, index, config: DenoiseConfig) -> SeedSet:
    if config.seed_method == "voxel":
        size = config.seed_size or auto_voxel_size(cloud, config.seed_ratio)
        return select_seeds(cloud, size)
    size = config.seed_size or auto_seed_radius(cloud, config.seed_ratio, index)
    return select_seeds_radius(cloud, size, index)


# Fields that only affect the Tucker stage; configs that differ in nothing
# else can share one grouping pass.
TUCKER_FIELDS = ("ranks", "delta_thre", "hooi_max_iters", "hooi_tol", "hooi_starts")

# Worker state for the process pool; set once per worker by _init_worker.
_WORKER: Dict[str, object] = {}


def _init_worker(nbrs, coords, candidates, configs, n_points):
    _WORKER.update(nbrs=nbrs, coords=coords, candidates=candidates, configs=configs, n=n_points)


def _denoise_tensors(tensors: List[np.ndarray], config: DenoiseConfig):
    """Tucker stage for a list of group tensors, batched by group size."""
    outputs = list(tensors)
    by_size: Dict[int, List[int]] = {}
    for j, A in enumerate(tensors):
        if should_denoise(A.shape, config.ranks):
            by_size.setdefault(A.shape[2], []).append(j)
    for js in by_size.values():
        stack = np.stack([tensors[j] for j in js])
        offset = stack[:, :, :, 0].mean(axis=1) if config.center_patches else np.zeros((len(js), 3))
        shifted = stack - offset[:, None, :, None]
        out = denoise_batch(
            shifted, config.ranks, config.delta_thre, config.hooi_max_iters, config.hooi_tol,
            config.hooi_starts,
        ) + offset[:, None, :, None]
        for q, j in enumerate(js):
            outputs[j] = out[q]
    return outputs, sum(len(js) for js in by_size.values())


def _process_chunk(refs: np.ndarray, nbrs, coords, candidates, configs: Sequence[DenoiseConfig], n: int):
    """Group one block of reference patches, then denoise and accumulate it once per config."""
    cfg0 = configs[0]
    ga = group_all(coords, candidates, cfg0.delta_sim, cfg0.icp_max_iters, cfg0.icp_tol, refs)
    tensors = [
        np.concatenate(
            [coords[r][:, :, None], np.moveaxis(ga.aligned[ga.offsets[j]:ga.offsets[j + 1]], 0, 2)],
            axis=2,
        )
        for j, r in enumerate(refs)
    ]
    idx = np.concatenate(
        [
            part.ravel()
            for j, r in enumerate(refs)
            for part in (
                nbrs[r],
                np.take_along_axis(
                    nbrs[ga.members[ga.offsets[j]:ga.offsets[j + 1]]],
                    ga.rows[ga.offsets[j]:ga.offsets[j + 1]],
                    axis=1,
                ),
            )
        ]
    )
    results = []
    for config in configs:
        outputs, n_denoised = _denoise_tensors(tensors, config)
        # one scatter per chunk: reference rows, then member rows, group by group
        vals = []
        for j, out in enumerate(outputs):
            lo, hi = ga.offsets[j], ga.offsets[j + 1]
            back = (np.moveaxis(out[:, :, 1:], 2, 0) - ga.translations[lo:hi][:, None]) @ ga.rotations[lo:hi]
            vals += [out[:, :, 0], back.reshape(-1, 3)]
        acc = Accumulator(n)
        acc.add(idx, np.concatenate(vals))
        results.append((acc, n_denoised))
    return results, ga.sizes()


def _process_chunk_worker(refs):
    w = _WORKER
    return _process_chunk(refs, w["nbrs"], w["coords"], w["candidates"], w["configs"], w["n"])


def denoise(
    cloud: PointCloud, config: Optional[DenoiseConfig] = None
) -> Tuple[PointCloud, DenoiseReport]:
    """Run the full four-phase denoiser on ``cloud``.

    Output point i is the average of all denoised estimates of input point i.
    The result does not depend on ``config.threads``.
    """
    return denoise_many(cloud, [config or DenoiseConfig()])[0]


def denoise_many(
    cloud: PointCloud, configs: Sequence[DenoiseConfig]
) -> List[Tuple[PointCloud, DenoiseReport]]:
    """Denoise ``cloud`` under several configs that share one grouping pass.

    The configs may differ only in :data:`TUCKER_FIELDS`; each result equals
    what :func:`denoise` returns for that config alone. Threads are taken
    from the first config.
    """
    if not configs:
        return []
    config = configs[0]
    for other in configs[1:]:
        for f in DenoiseConfig.field_names():
            if f not in TUCKER_FIELDS and f != "threads" and getattr(other, f) != getattr(config, f):
                raise ValueError(f"configs differ in {f!r}, which changes the grouping")
    K = config.resolved_k()
    N = len(cloud)
    if N < K:
        raise ValueError(f"cloud has {N} points, fewer than K={K}")
    report = DenoiseReport(k=K, n_points=N)

    t0 = time.perf_counter()
    index = build_index(cloud)
    seeds = choose_seeds(cloud, index, config)
    covered, missing = coverage_check(cloud, seeds, K, index)
    if not covered and config.ensure_coverage:
        seeds = SeedSet(np.union1d(seeds.indices, missing), seeds.voxel_size, seeds.method)
    nbrs, coords = patch_arrays(index, seeds, K)
    hit = np.zeros(N, dtype=bool)
    hit[nbrs.ravel()] = True
    report.n_seeds = len(seeds)
    report.seed_size = seeds.voxel_size
    report.points_covered = int(hit.sum())
    report.points_uncovered = N - report.points_covered
    report.timings["patches"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    candidates = candidate_lists(cloud.points[seeds.indices], config.n_reg)
    S = len(seeds)
    chunks = [np.arange(lo, min(S, lo + GROUP_CHUNK)) for lo in range(0, S, GROUP_CHUNK)]
    configs = list(configs)
    if config.threads > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(
            max_workers=config.threads,
            initializer=_init_worker,
            initargs=(nbrs, coords, candidates, configs, N),
        ) as pool:
            results = list(pool.map(_process_chunk_worker, chunks))
    else:
        results = [_process_chunk(c, nbrs, coords, candidates, configs, N) for c in chunks]

    sizes = np.concatenate([part_sizes for _, part_sizes in results]) if results else np.zeros(0)
    elapsed = time.perf_counter() - t1
    outs = []
    for v, cfg in enumerate(configs):
        rep = dataclasses.replace(report, timings=dict(report.timings))
        acc = Accumulator(N)
        for parts, _ in results:
            part, n_denoised = parts[v]
            acc.merge(part)
            rep.groups_denoised += int(n_denoised)
        rep.groups_formed = S
        rep.groups_skipped_small = S - rep.groups_denoised
        rep.mean_group_size = float(sizes.mean()) if sizes.size else 0.0
        rep.timings["group_and_denoise"] = elapsed
        out = cloud.with_points(acc.result(cloud.points))
        rep.timings["total"] = time.perf_counter() - t0
        logger.info("denoise: %s", rep.summary())
        outs.append((out, rep))
    return outs
