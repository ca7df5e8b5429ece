"""Point cloud container, bounding boxes and ASCII PLY / XYZ file I/O."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# 17 significant digits round-trips every float64 exactly.
_FLOAT_FMT = "%.17g"


class CloudParseError(ValueError):
    """Raised when a cloud file is malformed. Carries the 1-based line number."""

    def __init__(self, message: str, path: PathLike = "", line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}" if where else message)


class EmptyCloudError(ValueError):
    """Raised when a file parses but contains no points."""


@dataclass(frozen=True)
class PointCloud:
    """An ordered, immutable set of 3D points.

    ``points`` is the N x 3 position matrix; row i is point i. The array is
    copied on construction and marked read-only so instances can be shared.
    """

    points: np.ndarray
    name: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyCloudError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, name=self.name)


@dataclass(frozen=True)
class BoundingBox:
    min: np.ndarray
    max: np.ndarray

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.min) & (points <= self.max), axis=1)


def bounding_box(cloud: PointCloud) -> BoundingBox:
    """Tight axis-aligned box around all points of ``cloud``."""
    return BoundingBox(cloud.points.min(axis=0), cloud.points.max(axis=0))


def _resolve_format(path: Path, fmt: str) -> str:
    if fmt != "auto":
        if fmt not in ("ply", "xyz"):
            raise ValueError(f"unknown cloud format {fmt!r}")
        return fmt
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return "ply"
    if suffix in (".xyz", ".txt", ".pts"):
        return "xyz"
    raise ValueError(f"cannot infer cloud format from suffix {suffix!r}; pass fmt explicitly")


def _parse_float(token: str, path: Path, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise CloudParseError(f"not a number: {token!r}", path, lineno) from None
    if not math.isfinite(value):
        raise CloudParseError(f"non-finite coordinate {token!r}", path, lineno)
    return value


def _read_xyz(path: Path, text: str) -> np.ndarray:
    rows = []
    extra_columns = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) < 3:
            raise CloudParseError(f"expected 3 coordinates, got {len(tokens)}", path, lineno)
        if len(tokens) > 3:
            extra_columns = True
        rows.append([_parse_float(t, path, lineno) for t in tokens[:3]])
    if extra_columns:
        logger.warning("%s: ignoring columns beyond x y z", path)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _read_ply(path: Path, text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError("missing 'ply' magic", path, 1)

    n_vertex = None
    vertex_props: list[str] = []
    elements: list[tuple[str, int]] = []
    current = None
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise CloudParseError("only ASCII PLY is supported", path, lineno)
        elif key == "element":
            if len(tokens) != 3:
                raise CloudParseError("malformed element line", path, lineno)
            try:
                count = int(tokens[2])
            except ValueError:
                raise CloudParseError(f"bad element count {tokens[2]!r}", path, lineno) from None
            current = tokens[1]
            elements.append((current, count))
            if current == "vertex":
                n_vertex = count
        elif key == "property":
            if current == "vertex":
                if tokens[1] == "list":
                    raise CloudParseError("list properties on vertices are not supported", path, lineno)
                vertex_props.append(tokens[-1])
        elif key == "end_header":
            header_end = lineno
            break
        else:
            raise CloudParseError(f"unexpected header keyword {key!r}", path, lineno)

    if header_end is None:
        raise CloudParseError("missing end_header", path, len(lines))
    if n_vertex is None:
        raise CloudParseError("no 'element vertex' declared", path, header_end)
    try:
        cols = [vertex_props.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise CloudParseError("vertex element lacks x/y/z properties", path, header_end) from None
    if len(vertex_props) > 3:
        others = [p for p in vertex_props if p not in ("x", "y", "z")]
        logger.warning("%s: ignoring vertex properties %s", path, ", ".join(others))

    # Vertex rows come first only if vertex is the first element.
    skip = 0
    for name, count in elements:
        if name == "vertex":
            break
        skip += count

    body = [(i, ln) for i, ln in enumerate(lines[header_end:], start=header_end + 1) if ln.strip()]
    rows = body[skip:skip + n_vertex]
    if len(rows) < n_vertex:
        last = rows[-1][0] if rows else header_end
        raise CloudParseError(
            f"header declares {n_vertex} vertices but only {len(rows)} rows present", path, last
        )
    out = np.empty((n_vertex, 3), dtype=np.float64)
    for r, (lineno, raw) in enumerate(rows):
        tokens = raw.split()
        if len(tokens) < len(vertex_props):
            raise CloudParseError(
                f"expected {len(vertex_props)} values, got {len(tokens)}", path, lineno
            )
        out[r] = [_parse_float(tokens[c], path, lineno) for c in cols]
    return out


def read_cloud(path: PathLike, fmt: str = "auto") -> PointCloud:
    """Read vertex positions from an ASCII PLY or XYZ file, in file order.

    Raises:
        OSError: the file cannot be read.
        CloudParseError: malformed content; the message names the line.
        EmptyCloudError: the file holds no points.
    """
    path = Path(path)
    kind = _resolve_format(path, fmt)
    text = path.read_text(encoding="utf-8", errors="replace")
    pts = _read_ply(path, text) if kind == "ply" else _read_xyz(path, text)
    if pts.shape[0] == 0:
        raise EmptyCloudError(f"{path}: no points")
    return PointCloud(pts, name=path.stem)


def write_cloud(cloud: PointCloud, path: PathLike, fmt: str = "auto") -> None:
    """Write ``cloud`` as ASCII PLY or XYZ. Coordinates round-trip exactly."""
    if str(path) == "":
        raise FileNotFoundError("empty output path")
    path = Path(path)
    kind = _resolve_format(path, fmt)
    body = "\n".join(" ".join(_FLOAT_FMT % v for v in row) for row in cloud.points.tolist())
    if kind == "ply":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(cloud)}\n"
            "property double x\nproperty double y\nproperty double z\n"
            "end_header\n"
        )
        text = header + body + "\n"
    else:
        text = body + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
