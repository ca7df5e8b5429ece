"""Noise injection, the nearest-neighbour MSE metric and the benchmark harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .denoiser import DenoiseConfig, denoise_many
from .geometry import PointCloud, read_cloud, write_cloud
from .synth import make_shape, normalize_scale

logger = logging.getLogger(__name__)

CloudLike = Union[PointCloud, np.ndarray]

DEFAULT_SIGMAS = (0.04, 0.05, 0.08, 0.1)


@dataclass(frozen=True)
class NoiseModel:
    """Additive i.i.d. Gaussian noise drawn from numpy's PCG64 generator."""

    sigma: float
    rng_seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def add_noise(cloud: PointCloud, model: NoiseModel) -> PointCloud:
    """Return ``cloud`` with N(0, sigma^2) added independently to every coordinate."""
    if model.sigma == 0:
        return cloud.with_points(cloud.points)
    rng = np.random.default_rng(model.rng_seed)
    return cloud.with_points(cloud.points + rng.normal(0.0, model.sigma, cloud.points.shape))


def _as_points(c: CloudLike) -> np.ndarray:
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("expected a non-empty (N, 3) point set")
    return pts


def mse(truth: CloudLike, test: CloudLike) -> float:
    """Symmetric nearest-neighbour mean squared error, in squared model units.

    Half the sum of the mean squared distance from each test point to the
    closest truth point and from each truth point to the closest test point.
    """
    a = _as_points(truth)
    b = _as_points(test)
    d_ba, _ = cKDTree(a).query(b)
    d_ab, _ = cKDTree(b).query(a)
    return 0.5 * (float(np.mean(d_ba ** 2)) + float(np.mean(d_ab ** 2)))


@dataclass(frozen=True)
class EvalPair:
    ground_truth: PointCloud
    test: PointCloud

    def mse(self) -> float:
        return mse(self.ground_truth, self.test)


# -- benchmark -------------------------------------------------------------


@dataclass(frozen=True)
class ModelSource:
    """A benchmark model: a cloud file or ``synth:<shape>:<n>``."""

    spec: str
    normalize: bool = False

    @property
    def name(self) -> str:
        if self.spec.startswith("synth:"):
            return self.spec[len("synth:"):].replace(":", "")
        return Path(self.spec).stem

    def load(self) -> PointCloud:
        if self.spec.startswith("synth:"):
            parts = self.spec.split(":")
            if len(parts) != 3:
                raise ValueError(f"bad synthetic model spec {self.spec!r}")
            cloud = make_shape(parts[1], int(parts[2]))
        else:
            cloud = read_cloud(self.spec)
        return normalize_scale(cloud) if self.normalize else cloud


@dataclass
class BenchmarkRow:
    model: str
    sigma: float
    seed: int
    k: int = 0
    mse_noisy: Optional[float] = None
    mse_tude: Optional[float] = None
    mse_rank1: Optional[float] = None
    mse_nothresh: Optional[float] = None
    status: str = "ok"

    @property
    def reduction(self) -> Optional[float]:
        if self.mse_noisy is None or self.mse_tude is None or self.mse_noisy == 0:
            return None
        return 1.0 - self.mse_tude / self.mse_noisy


ROW_FIELDS = ["model", "sigma", "seed", "k", "mse_noisy", "mse_tude", "mse_rank1", "mse_nothresh", "status"]


def row_seed(seed: int, model: str, sigma: float) -> int:
    """Independent noise seed per (seed, model, sigma)."""
    ss = np.random.SeedSequence([seed, zlib.crc32(model.encode()), int(round(sigma * 1e9))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class BenchmarkResult:
    rows: List[BenchmarkRow] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)


def run_benchmark(
    models: Sequence[ModelSource],
    sigmas: Sequence[float] = DEFAULT_SIGMAS,
    seeds: Sequence[int] = (0,),
    config: Optional[DenoiseConfig] = None,
    variants: bool = True,
    cloud_dir: Optional[Path] = None,
) -> BenchmarkResult:
    """Noise every model at every sigma, denoise, and score with :func:`mse`.

    K follows ``sigma`` unless ``config.k`` is set. With ``variants`` two
    extra columns are filled: direct ranks (1, 1, 1) and (3, 3, 3) without
    thresholding. A model that fails to load yields failed rows; the others
    still run.
    """
    base = config or DenoiseConfig()
    result = BenchmarkResult()
    for source in models:
        try:
            clean = source.load()
            error = None
        except (OSError, ValueError) as exc:
            clean, error = None, f"failed: {exc}".replace("\n", " ")
            logger.error("model %s: %s", source.spec, exc)
        for sigma in sigmas:
            for seed in seeds:
                row = BenchmarkRow(source.name, float(sigma), int(seed))
                if clean is None:
                    row.status = error
                    result.rows.append(row)
                    continue
                t0 = time.perf_counter()
                try:
                    _run_row(row, clean, base, variants, cloud_dir)
                except Exception as exc:  # noqa: BLE001 - recorded in the row
                    row.status = f"failed: {exc}".replace("\n", " ")
                    logger.exception("row %s sigma=%s seed=%s failed", row.model, sigma, seed)
                result.timings[f"{row.model}/{sigma}/{seed}"] = time.perf_counter() - t0
                result.rows.append(row)
    return result


def _run_row(row: BenchmarkRow, clean: PointCloud, base: DenoiseConfig, variants: bool, cloud_dir):
    noisy = add_noise(clean, NoiseModel(row.sigma, row_seed(row.seed, row.model, row.sigma)))
    cfg = base if base.k is not None else base.replace(sigma=row.sigma)
    row.k = cfg.resolved_k()
    row.mse_noisy = mse(clean, noisy)
    configs = [cfg]
    if variants:
        configs += [cfg.replace(ranks=(1, 1, 1)), cfg.replace(delta_thre=0.0)]
    # the variants only change the Tucker stage, so they share one grouping pass
    results = denoise_many(noisy, configs)
    out = results[0][0]
    row.mse_tude = mse(clean, out)
    if variants:
        row.mse_rank1 = mse(clean, results[1][0])
        row.mse_nothresh = mse(clean, results[2][0])
    if cloud_dir is not None:
        cloud_dir = Path(cloud_dir)
        cloud_dir.mkdir(parents=True, exist_ok=True)
        stem = f"{row.model}_s{row.sigma:g}_seed{row.seed}"
        write_cloud(noisy, cloud_dir / f"{stem}_noisy.ply")
        write_cloud(out, cloud_dir / f"{stem}_tude.ply")


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6g}"


def rows_to_csv(rows: Iterable[BenchmarkRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in rows:
        d = asdict(r)
        w.writerow([_fmt(d[f]) if f.startswith("mse") else d[f] for f in ROW_FIELDS])
    return buf.getvalue()


def rows_to_table(rows: Sequence[BenchmarkRow]) -> str:
    """Aligned text tables, one per sigma, with a Model / Noisy / TUDE layout."""
    cols = ["Model", "Seed", "K", "Noisy", "TUDE", "Rank-1", "No-thre", "Status"]
    out = []
    for sigma in sorted({r.sigma for r in rows}):
        sub = [r for r in rows if r.sigma == sigma]
        body = [
            [r.model, str(r.seed), str(r.k), _table_val(r.mse_noisy, None),
             _table_val(r.mse_tude, r.mse_noisy), _table_val(r.mse_rank1, r.mse_noisy),
             _table_val(r.mse_nothresh, r.mse_noisy), r.status]
            for r in sub
        ]
        widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
        line = "  ".join("-" * w for w in widths)
        out.append(f"MSE for different models (sigma={sigma:g})")
        out.append(line)
        out.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
        out.append(line)
        out.extend("  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body)
        out.append(line)
        out.append("")
    return "\n".join(out)


def _table_val(v: Optional[float], noisy: Optional[float]) -> str:
    # "----" marks a method that did not lower the MSE
    if v is None:
        return ""
    if noisy is not None and v >= noisy:
        return "----"
    return f"{v:.5f}"


def summarize(rows: Sequence[BenchmarkRow]) -> Dict[str, object]:
    """Per-sigma medians used for the rank-1 comparison and improvement checks."""
    summary: Dict[str, object] = {}
    for sigma in sorted({r.sigma for r in rows}):
        ok = [r for r in rows if r.sigma == sigma and r.status == "ok"]
        if not ok:
            continue
        entry = {
            "runs": len(ok),
            "median_mse_noisy": float(np.median([r.mse_noisy for r in ok])),
            "median_mse_tude": float(np.median([r.mse_tude for r in ok])),
            "median_reduction": float(np.median([r.reduction for r in ok])),
            "all_improved": all(r.mse_tude < r.mse_noisy for r in ok),
        }
        if all(r.mse_rank1 is not None for r in ok):
            entry["median_mse_rank1"] = float(np.median([r.mse_rank1 for r in ok]))
            entry["median_mse_nothresh"] = float(np.median([r.mse_nothresh for r in ok]))
            entry["rank1_not_better"] = entry["median_mse_rank1"] >= entry["median_mse_tude"]
        summary[f"{sigma:g}"] = entry
    return summary


def write_report(result: BenchmarkResult, out_dir: Path, config: DenoiseConfig) -> None:
    """Write ``results.csv``, ``results.txt`` and ``report.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(rows_to_csv(result.rows), encoding="utf-8")
    (out_dir / "results.txt").write_text(rows_to_table(result.rows), encoding="utf-8")
    report = {
        "config": config.to_dict(),
        "rows": [asdict(r) for r in result.rows],
        "summary": summarize(result.rows),
        "timings": result.timings,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")


def parse_manifest(path: Union[str, Path]) -> Tuple[List[ModelSource], List[float], List[int]]:
    """Read a benchmark manifest.

    Lines are ``sigma <v> [<v> ...]``, ``seed <n> [<n> ...]`` or
    ``<model> [normalize|raw]`` where ``<model>`` is a cloud path (relative
    to the manifest) or ``synth:<shape>:<n>``. Synthetic models are
    normalized unless marked ``raw``. ``#`` starts a comment.
    """
    path = Path(path)
    models: List[ModelSource] = []
    sigmas: List[float] = []
    seeds: List[int] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0].lower()
        try:
            if head == "sigma":
                sigmas.extend(float(t) for t in tokens[1:])
                continue
            if head == "seed":
                seeds.extend(int(t) for t in tokens[1:])
                continue
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad number in {line!r}") from None
        flag = tokens[1].lower() if len(tokens) > 1 else None
        if flag not in (None, "normalize", "raw"):
            raise ValueError(f"{path}:{lineno}: unknown flag {tokens[1]!r}")
        spec = tokens[0]
        synthetic = spec.startswith("synth:")
        if not synthetic and not Path(spec).is_absolute():
            spec = str(path.parent / spec)
        normalize = flag == "normalize" or (synthetic and flag != "raw")
        models.append(ModelSource(spec, normalize))
    if not sigmas:
        sigmas = list(DEFAULT_SIGMAS)
    if not seeds:
        seeds = [0]
    return models, sigmas, seeds
