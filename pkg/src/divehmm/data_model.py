"""Depth grids, tag records, and CSV/YAML ingestion."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

DEFAULT_BREAKPOINTS = (
    0.0, 30.0, 60.0, 100.0, 150.0, 200.0, 300.0, 400.0,
    500.0, 600.0, 800.0, 1000.0, 1200.0, 1500.0, 2000.0,
)
DEFAULT_DELTA = 300.0
DEFAULT_DEEP = 800.0
DEFAULT_SHALLOW = 200.0

CSV_HEADER = ("tag_id", "time_s", "depth_bin", "celestial", "exposed")


class DataError(ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class CelestialLabel(enum.IntEnum):
    DAY = 0
    DARK = 1
    MOONLIT = 2

    @classmethod
    def parse(cls, text: str) -> "CelestialLabel":
        try:
            return _LABEL_NAMES[text.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown celestial label {text!r}") from None

    @property
    def code(self) -> str:
        return ("day", "dark", "moonlit")[self.value]


_LABEL_NAMES = {
    "day": CelestialLabel.DAY,
    "daytime": CelestialLabel.DAY,
    "dark": CelestialLabel.DARK,
    "dark_night": CelestialLabel.DARK,
    "moonlit": CelestialLabel.MOONLIT,
    "moonlit_night": CelestialLabel.MOONLIT,
}


@dataclass(frozen=True)
class DepthGrid:
    """Breakpoints ``D_0 < ... < D_M`` (meters) defining M half-open depth bins.

    Bins are numbered 1..M; bin ``l`` covers ``[D_{l-1}, D_l)``.
    """

    breakpoints: tuple[float, ...]

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        object.__setattr__(self, "breakpoints", bp)
        if len(bp) < 3:
            raise ValueError("a depth grid needs at least 2 bins")
        if bp[0] != 0.0:
            raise ValueError("first breakpoint must be 0 (the surface)")
        if any(not math.isfinite(b) for b in bp):
            raise ValueError("breakpoints must be finite")
        if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
            raise ValueError("breakpoints must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return len(self.breakpoints) - 1

    @property
    def widths(self) -> np.ndarray:
        w = np.diff(np.asarray(self.breakpoints))
        w.setflags(write=False)
        return w

    @property
    def midpoints(self) -> np.ndarray:
        bp = np.asarray(self.breakpoints)
        m = 0.5 * (bp[:-1] + bp[1:])
        m.setflags(write=False)
        return m

    @property
    def max_depth(self) -> float:
        return self.breakpoints[-1]


def default_grid() -> DepthGrid:
    return DepthGrid(DEFAULT_BREAKPOINTS)


def bin_of_depth(grid: DepthGrid, depth: float) -> int:
    """1-based bin index containing ``depth``; ``D_M`` itself maps to bin M."""
    if not (0.0 <= depth <= grid.max_depth):
        raise ValueError(f"depth {depth} outside [0, {grid.max_depth}]")
    if depth == grid.max_depth:
        return grid.n_bins
    # bisect_right on the interior breakpoints gives the 0-based interval
    idx = int(np.searchsorted(np.asarray(grid.breakpoints), depth, side="right"))
    return idx


@dataclass(frozen=True)
class TagRecord:
    """One animal's regularly sampled depth-bin series.

    ``bins`` are 1-based, ``celestial`` holds :class:`CelestialLabel` codes,
    and ``exposure_index`` (0-based) marks the last pre-exposure observation.
    """

    tag_id: str
    times: np.ndarray
    bins: np.ndarray
    celestial: np.ndarray
    delta: float = DEFAULT_DELTA
    exposure_index: int | None = None

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=float)
        bins = np.ascontiguousarray(self.bins, dtype=np.int64)
        cel = np.ascontiguousarray(self.celestial, dtype=np.int64)
        if not (times.shape == bins.shape == cel.shape) or times.ndim != 1:
            raise ValueError("times, bins and celestial must be 1-d and equally long")
        if self.delta <= 0:
            raise ValueError("sampling interval must be positive")
        if times.size and np.any(np.diff(times) <= 0):
            raise ValueError(f"tag {self.tag_id}: times must be strictly increasing")
        if cel.size and (cel.min() < 0 or cel.max() > 2):
            raise ValueError(f"tag {self.tag_id}: bad celestial code")
        if bins.size and bins.min() < 1:
            raise ValueError(f"tag {self.tag_id}: bin indices are 1-based")
        if self.exposure_index is not None and not 0 <= self.exposure_index < times.size:
            raise ValueError(f"tag {self.tag_id}: exposure index out of range")
        for arr in (times, bins, cel):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "bins", bins)
        object.__setattr__(self, "celestial", cel)

    def __len__(self) -> int:
        return self.bins.size

    def __eq__(self, other):
        if not isinstance(other, TagRecord):
            return NotImplemented
        return (
            self.tag_id == other.tag_id
            and self.delta == other.delta
            and self.exposure_index == other.exposure_index
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.bins, other.bins)
            and np.array_equal(self.celestial, other.celestial)
        )

    __hash__ = None

    def slice(self, start: int, stop: int) -> "TagRecord":
        exposure = self.exposure_index
        if exposure is not None:
            exposure = exposure - start if start <= exposure < stop else None
        return TagRecord(
            self.tag_id, self.times[start:stop], self.bins[start:stop],
            self.celestial[start:stop], self.delta, exposure,
        )

    def baseline(self) -> "TagRecord":
        """Observations up to and including the exposure index."""
        if self.exposure_index is None:
            return self
        out = self.slice(0, self.exposure_index + 1)
        return TagRecord(out.tag_id, out.times, out.bins, out.celestial, out.delta, None)


@dataclass(frozen=True)
class Dataset:
    grid: DepthGrid
    tags: tuple[TagRecord, ...]
    deep_threshold: float = DEFAULT_DEEP
    shallow_threshold: float = DEFAULT_SHALLOW
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        tags = tuple(sorted(self.tags, key=lambda t: t.tag_id))
        object.__setattr__(self, "tags", tags)
        if not 0 < self.shallow_threshold < self.deep_threshold <= self.grid.max_depth:
            raise ValueError("thresholds must satisfy 0 < shallow < deep <= D_M")
        ids = [t.tag_id for t in tags]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate tag ids")
        for tag in tags:
            if tag.bins.size and tag.bins.max() > self.grid.n_bins:
                raise ValueError(f"tag {tag.tag_id}: bin index exceeds M={self.grid.n_bins}")

    @property
    def tag_ids(self) -> list[str]:
        return [t.tag_id for t in self.tags]

    def baseline(self) -> "Dataset":
        return Dataset(self.grid, tuple(t.baseline() for t in self.tags),
                       self.deep_threshold, self.shallow_threshold, self.delta)

    def exposed(self) -> list[TagRecord]:
        return [t for t in self.tags if t.exposure_index is not None]


def segment_record(record: TagRecord) -> list[TagRecord]:
    """Split a record wherever consecutive times are not exactly one interval apart."""
    n = len(record)
    if n == 0:
        return []
    gaps = np.flatnonzero(~np.isclose(np.diff(record.times), record.delta, rtol=0, atol=1e-6))
    edges = [0, *(gaps + 1).tolist(), n]
    return [record.slice(a, b) for a, b in zip(edges, edges[1:])]


@dataclass(frozen=True)
class GridConfig:
    grid: DepthGrid = field(default_factory=default_grid)
    delta: float = DEFAULT_DELTA
    deep_threshold: float = DEFAULT_DEEP
    shallow_threshold: float = DEFAULT_SHALLOW

    @classmethod
    def from_mapping(cls, cfg: dict) -> "GridConfig":
        bp = cfg.get("breakpoints_m", DEFAULT_BREAKPOINTS)
        try:
            out = cls(
                DepthGrid(tuple(float(b) for b in bp)),
                float(cfg.get("delta_s", DEFAULT_DELTA)),
                float(cfg.get("deep_threshold_m", DEFAULT_DEEP)),
                float(cfg.get("shallow_threshold_m", DEFAULT_SHALLOW)),
            )
        except (TypeError, ValueError) as exc:
            raise ValueError(f"invalid grid config: {exc}") from exc
        if out.delta <= 0:
            raise ValueError("delta_s must be positive")
        if not 0 < out.shallow_threshold < out.deep_threshold <= out.grid.max_depth:
            raise ValueError("thresholds must satisfy 0 < shallow < deep <= D_M")
        return out

    def to_mapping(self) -> dict:
        return {
            "breakpoints_m": list(self.grid.breakpoints),
            "delta_s": self.delta,
            "deep_threshold_m": self.deep_threshold,
            "shallow_threshold_m": self.shallow_threshold,
        }


def load_config(path: str | Path) -> dict:
    """Read a YAML config file into a plain dict."""
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return cfg


def load_grid_config(path: str | Path) -> GridConfig:
    cfg = load_config(path)
    return GridConfig.from_mapping(cfg.get("grid", cfg))


def _parse_rows(rows: Iterable[dict], n_bins: int):
    per_tag: dict[str, list[tuple[float, int, int, int, int]]] = {}
    for rowno, row in enumerate(rows, start=2):  # header is line 1
        try:
            tag = row["tag_id"].strip()
            t = float(row["time_s"])
            b = int(row["depth_bin"])
            exposed = int(row["exposed"])
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise DataError(f"malformed row ({exc})", rowno) from None
        if not tag:
            raise DataError("empty tag_id", rowno)
        if not math.isfinite(t):
            raise DataError("non-finite time", rowno)
        try:
            cel = CelestialLabel.parse(row["celestial"] or "")
        except ValueError as exc:
            raise DataError(str(exc), rowno) from None
        if not 1 <= b <= n_bins:
            raise DataError(f"depth_bin {b} outside 1..{n_bins}", rowno)
        if exposed not in (0, 1):
            raise DataError(f"exposed must be 0 or 1, got {exposed}", rowno)
        per_tag.setdefault(tag, []).append((t, b, int(cel), exposed, rowno))
    return per_tag


def load_dataset(path: str | Path, grid_config: GridConfig | None = None) -> Dataset:
    """Read the tag CSV (``tag_id,time_s,depth_bin,celestial,exposed``).

    Rows of each tag may appear interleaved with other tags; each tag is
    sorted by time. Duplicate times and more than one 0->1 switch of the
    ``exposed`` flag are validation errors.
    """
    cfg = grid_config or GridConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(f.strip() for f in reader.fieldnames) != CSV_HEADER:
            raise DataError(f"header must be {','.join(CSV_HEADER)}", 1)
        per_tag = _parse_rows(reader, cfg.grid.n_bins)

    tags = []
    for tag_id, rows in per_tag.items():
        rows.sort(key=lambda r: r[0])
        times = np.array([r[0] for r in rows])
        dup = np.flatnonzero(np.diff(times) == 0)
        if dup.size:
            raise DataError(f"tag {tag_id}: duplicate time {times[dup[0]]}", rows[dup[0] + 1][4])
        exposed = np.array([r[3] for r in rows])
        switches = np.flatnonzero(np.diff(exposed) != 0)
        if switches.size > 1 or (switches.size == 1 and exposed[0] == 1):
            raise DataError(f"tag {tag_id}: exposed flag must switch 0->1 at most once")
        exposure_index = int(np.argmax(exposed)) if exposed.any() else None
        tags.append(TagRecord(
            tag_id, times, np.array([r[1] for r in rows]), np.array([r[2] for r in rows]),
            cfg.delta, exposure_index,
        ))
    return Dataset(cfg.grid, tuple(tags), cfg.deep_threshold, cfg.shallow_threshold, cfg.delta)


def write_dataset(dataset: Dataset | Sequence[TagRecord], path: str | Path) -> None:
    """Inverse of :func:`load_dataset`; tags are written in tag-id order."""
    tags = dataset.tags if isinstance(dataset, Dataset) else sorted(dataset, key=lambda t: t.tag_id)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for tag in tags:
            for j in range(len(tag)):
                exposed = int(tag.exposure_index is not None and j >= tag.exposure_index)
                writer.writerow([
                    tag.tag_id, repr(float(tag.times[j])), int(tag.bins[j]),
                    CelestialLabel(int(tag.celestial[j])).code, exposed,
                ])
