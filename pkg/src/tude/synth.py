"""Deterministic synthetic surfaces used as clean ground truth.

All samplings use low-discrepancy golden-ratio sequences, so the same ``n``
always yields the same points and no two neighbours sit at exactly equal
distances the way a regular grid would.

* sphere: unit radius, centred at the origin (Fibonacci lattice).
* plane: unit square ``[0, 1]^2`` at ``z = 0`` (R2 sequence).
* torus: major radius 1, minor radius 0.4 about the z axis; angles from the
  R2 sequence with area-proportional weighting on the tube angle.
"""

from __future__ import annotations

import numpy as np

from .geometry import PointCloud, bounding_box

GOLDEN = (1 + 5 ** 0.5) / 2
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4
SHAPES = ("sphere", "plane", "torus")


def _r2(n: int) -> np.ndarray:
    # Roberts' R2 sequence, the 2D golden-ratio generalisation
    g = 1.32471795724474602596
    a = np.array([1 / g, 1 / g ** 2])
    i = np.arange(1, n + 1)[:, None]
    return np.mod(0.5 + i * a, 1.0)


def sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azimuth = 2 * np.pi * i / GOLDEN
    return np.column_stack(
        [np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)]
    )


def plane(n: int) -> np.ndarray:
    uv = _r2(n)
    return np.column_stack([uv, np.zeros(n)])


def torus(n: int) -> np.ndarray:
    uv = _r2(n)
    u = 2 * np.pi * uv[:, 0]
    # invert the CDF of the area element (R + r cos v) dv on [0, 2pi)
    target = uv[:, 1] * 2 * np.pi * TORUS_MAJOR
    v = target / TORUS_MAJOR
    for _ in range(50):
        f = TORUS_MAJOR * v + TORUS_MINOR * np.sin(v) - target
        v = v - f / (TORUS_MAJOR + TORUS_MINOR * np.cos(v))
    ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)])


def torus_residual(points: np.ndarray) -> np.ndarray:
    """Implicit torus equation evaluated at ``points``; zero on the surface."""
    rho = np.hypot(points[:, 0], points[:, 1])
    return (rho - TORUS_MAJOR) ** 2 + points[:, 2] ** 2 - TORUS_MINOR ** 2


def make_shape(shape: str, n: int) -> PointCloud:
    if n < 10:
        raise ValueError("synthetic shapes need at least 10 points")
    builders = {"sphere": sphere, "plane": plane, "torus": torus}
    if shape not in builders:
        raise ValueError(f"unknown shape {shape!r}; choose from {', '.join(SHAPES)}")
    return PointCloud(builders[shape](n), name=f"{shape}{n}")


def normalize_scale(cloud: PointCloud, diagonal: float = 10.0) -> PointCloud:
    """Centre the bounding box at the origin and scale its diagonal to ``diagonal``."""
    box = bounding_box(cloud)
    if box.diagonal == 0:
        return cloud
    return cloud.with_points((cloud.points - box.center) * (diagonal / box.diagonal))
