"""Retinal geometry: implant layouts, axon trajectories, and axon maps.

Coordinates are microns on the retinal surface of a right eye: x runs
temporal (negative) to nasal (positive) with the fovea at the origin, y
runs inferior (negative) to superior (positive). Ganglion-cell axons
leave their soma and arc toward the optic disc; the renderer consumes a
precomputed per-pixel discretization of those paths.
"""

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataFormatError, GeometryError

FIELD_BOUND_UM = 15000.0

_AXMP_MAGIC = b"AXMP"
_AXMP_VERSION = 1


class RetinalPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class ImplantLayout:
    """Regular electrode grid. Positions are row-major and stable."""

    rows: int
    cols: int
    pitch: float
    electrode_radius: float
    center: RetinalPoint
    positions: np.ndarray  # (n_e, 2) um

    @property
    def n_electrodes(self):
        return self.rows * self.cols


@dataclass(frozen=True, eq=False)
class AxonTrajectory:
    """Discretized axon path starting at the soma.

    ``cum_length[i]`` is the arc length from the soma to segment i,
    accumulated piecewise-linearly; it is nondecreasing and starts at 0.
    """

    soma: RetinalPoint
    segments: np.ndarray  # (n_segments, 2) um
    cum_length: np.ndarray  # (n_segments,) um


@dataclass(frozen=True)
class SpiralParams:
    """Constants of the axon-trajectory family.

    The default family is a spiral in polar coordinates around the optic
    disc: radius shrinks linearly from the soma to the disc center while
    the polar angle is swept by ``curvature * sin(theta0)``, which keeps
    horizontal-meridian axons straight (the raphe) and mirrors superior
    and inferior arcs. ``mode="straight"`` replaces the family with
    horizontal lines toward the disc for analytically checkable tests.
    """

    disc: RetinalPoint = RetinalPoint(4000.0, 0.0)
    curvature: float = 1.0
    mode: str = "spiral"
    eye: str = "right"

    def disc_position(self):
        if self.eye not in ("right", "left"):
            raise GeometryError(f"eye must be 'right' or 'left', got {self.eye!r}")
        sign = 1.0 if self.eye == "right" else -1.0
        return RetinalPoint(sign * self.disc.x, self.disc.y)


def _check_point(p, name="point"):
    x, y = float(p[0]), float(p[1])
    if not (np.isfinite(x) and np.isfinite(y)):
        raise GeometryError(f"{name} has non-finite coordinates")
    if abs(x) > FIELD_BOUND_UM or abs(y) > FIELD_BOUND_UM:
        raise GeometryError(f"{name} {x, y} outside the +-{FIELD_BOUND_UM} um field bound")
    return RetinalPoint(x, y)


def build_implant(rows, cols, pitch, radius, center=RetinalPoint(0.0, 0.0)):
    """Build a row-major electrode grid centered at ``center``.

    Row 0 is the superior edge (largest y); columns increase with x.
    """
    rows, cols = int(rows), int(cols)
    if rows < 1 or cols < 1:
        raise GeometryError(f"rows and cols must be >= 1, got ({rows}, {cols})")
    if pitch <= 0:
        raise GeometryError(f"pitch must be positive, got {pitch}")
    if radius <= 0:
        raise GeometryError(f"electrode radius must be positive, got {radius}")
    center = _check_point(center, "implant center")
    col_off = (np.arange(cols) - (cols - 1) / 2.0) * pitch
    row_off = ((rows - 1) / 2.0 - np.arange(rows)) * pitch
    xs = center.x + np.tile(col_off, rows)
    ys = center.y + np.repeat(row_off, cols)
    positions = np.column_stack([xs, ys]).astype(np.float64)
    return ImplantLayout(rows, cols, float(pitch), float(radius), center, positions)


def _segment_points(soma, n_segments, params):
    disc = params.disc_position()
    if params.mode == "straight":
        t = np.linspace(0.0, 1.0, n_segments)
        xs = soma.x + t * (disc.x - soma.x)
        ys = np.full(n_segments, soma.y)
        return np.column_stack([xs, ys])
    if params.mode != "spiral":
        raise GeometryError(f"unknown trajectory mode {params.mode!r}")
    dx, dy = soma.x - disc.x, soma.y - disc.y
    r0 = np.hypot(dx, dy)
    theta0 = np.arctan2(dy, dx)
    t = np.linspace(0.0, 1.0, n_segments)
    theta = theta0 + params.curvature * np.sin(theta0) * t
    r = r0 * (1.0 - t)
    xs = disc.x + r * np.cos(theta)
    ys = disc.y + r * np.sin(theta)
    return np.column_stack([xs, ys])


def _cumulative_length(points):
    gaps = np.hypot(np.diff(points[:, 0]), np.diff(points[:, 1]))
    return np.concatenate([[0.0], np.cumsum(gaps)])


def axon_trajectory(soma, n_segments, params=SpiralParams()):
    """Discretize the axon of the ganglion cell whose soma is at ``soma``.

    The first segment sits on the soma; segments trace toward the optic
    disc. Arc lengths are piecewise-linear sums of segment gaps.
    """
    n_segments = int(n_segments)
    if n_segments < 2:
        raise GeometryError(f"n_segments must be >= 2, got {n_segments}")
    soma = _check_point(soma, "soma")
    points = _segment_points(soma, n_segments, params)
    return AxonTrajectory(soma, points, _cumulative_length(points))


def path_length(traj, a, x):
    """Arc length along the trajectory between segment indices a and x."""
    n = traj.cum_length.shape[0]
    a, x = int(a), int(x)
    if not (0 <= a < n and 0 <= x < n):
        raise IndexError(f"segment indices ({a}, {x}) out of range for {n} segments")
    return float(abs(traj.cum_length[x] - traj.cum_length[a]))


@dataclass(frozen=True, eq=False)
class AxonMapGrid:
    """Per-pixel axon geometry over a square retinal field.

    Pixel (i, j) of the (H, W) grid maps linearly onto the field: x spans
    [-extent, +extent] left to right, y spans [+extent, -extent] top to
    bottom. ``seg_xy[p, s]`` is the position of segment s of the axon
    whose soma sits at pixel p (row-major); ``cum_length[p, s]`` is the
    corresponding arc length from the soma. Immutable and shareable.
    """

    grid_shape: tuple
    field_extent: float
    n_segments: int
    pixel_positions: np.ndarray  # (H*W, 2)
    seg_xy: np.ndarray  # (H*W, n_segments, 2)
    cum_length: np.ndarray  # (H*W, n_segments)
    spiral: SpiralParams = SpiralParams()

    @property
    def n_pixels(self):
        return self.grid_shape[0] * self.grid_shape[1]

    def trajectory(self, i, j=None):
        """Materialize the AxonTrajectory of pixel (i, j) or flat index i."""
        h, w = self.grid_shape
        p = i * w + j if j is not None else i
        if not 0 <= p < self.n_pixels:
            raise IndexError(f"pixel index {p} out of range")
        soma = RetinalPoint(*self.pixel_positions[p])
        return AxonTrajectory(soma, self.seg_xy[p].copy(), self.cum_length[p].copy())


def grid_coordinates(grid_shape, field_extent):
    """Pixel-center coordinates of the (H, W) grid over the square field."""
    h, w = int(grid_shape[0]), int(grid_shape[1])
    if h < 1 or w < 1:
        raise GeometryError(f"grid shape must be >= 1 in both axes, got {grid_shape}")
    if field_extent <= 0:
        raise GeometryError(f"field extent must be positive, got {field_extent}")
    if field_extent > FIELD_BOUND_UM:
        raise GeometryError(f"field extent {field_extent} exceeds the simulated bound")
    xs = np.linspace(-field_extent, field_extent, w) if w > 1 else np.array([0.0])
    ys = np.linspace(field_extent, -field_extent, h) if h > 1 else np.array([0.0])
    return xs, ys


def build_axon_map(grid_shape, field_extent, n_segments, params=SpiralParams()):
    """Precompute axon geometry for every pixel of the percept grid.

    Deterministic for a fixed argument tuple, so maps can be cached on
    disk (see save_axon_map/load_axon_map). Construction is pure and the
    result immutable.
    """
    n_segments = int(n_segments)
    if n_segments < 2:
        raise GeometryError(f"n_segments must be >= 2, got {n_segments}")
    xs, ys = grid_coordinates(grid_shape, field_extent)
    h, w = int(grid_shape[0]), int(grid_shape[1])
    n_px = h * w
    pixel_positions = np.empty((n_px, 2))
    seg_xy = np.empty((n_px, n_segments, 2))
    cum = np.empty((n_px, n_segments))
    p = 0
    for yi in ys:
        for xj in xs:
            soma = RetinalPoint(float(xj), float(yi))
            pts = _segment_points(soma, n_segments, params)
            pixel_positions[p] = (soma.x, soma.y)
            seg_xy[p] = pts
            cum[p] = _cumulative_length(pts)
            p += 1
    return AxonMapGrid((h, w), float(field_extent), n_segments, pixel_positions, seg_xy, cum, params)


def pixel_index_of(grid, point):
    """Flat index of the grid pixel nearest to a retinal point."""
    h, w = grid.grid_shape
    e = grid.field_extent
    x, y = float(point[0]), float(point[1])
    j = int(np.clip(np.rint((x + e) / (2 * e) * (w - 1)), 0, w - 1)) if w > 1 else 0
    i = int(np.clip(np.rint((e - y) / (2 * e) * (h - 1)), 0, h - 1)) if h > 1 else 0
    return i * w + j


def save_axon_map(grid, path):
    """Serialize an axon map to the versioned binary container.

    Layout (little-endian): magic "AXMP", uint32 version, uint32 H, W,
    n_segments, then three row-major float32 arrays of length
    H*W*n_segments: segment x, segment y, cumulative arc length.
    """
    h, w = grid.grid_shape
    with open(path, "wb") as fh:
        fh.write(_AXMP_MAGIC)
        fh.write(struct.pack("<IIII", _AXMP_VERSION, h, w, grid.n_segments))
        fh.write(np.ascontiguousarray(grid.seg_xy[:, :, 0], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(grid.seg_xy[:, :, 1], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(grid.cum_length, dtype="<f4").tobytes())


def load_axon_map(path, field_extent):
    """Load an axon map written by :func:`save_axon_map`.

    The container does not embed the field extent (it is part of the run
    config); coordinates round-trip at float32 precision.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _AXMP_MAGIC:
            raise DataFormatError(f"{path}: bad axon-map magic {magic!r}")
        version, h, w, n_seg = struct.unpack("<IIII", fh.read(16))
        if version != _AXMP_VERSION:
            raise DataFormatError(f"{path}: unsupported axon-map version {version}")
        n = h * w * n_seg
        raw = fh.read(3 * n * 4)
        if len(raw) != 3 * n * 4:
            raise DataFormatError(f"{path}: truncated axon-map payload")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    xs, ys_, ls = flat[:n], flat[n : 2 * n], flat[2 * n :]
    seg_xy = np.stack([xs.reshape(h * w, n_seg), ys_.reshape(h * w, n_seg)], axis=-1)
    cum = ls.reshape(h * w, n_seg)
    return AxonMapGrid((h, w), float(field_extent), n_seg, seg_xy[:, 0].copy(), seg_xy, cum)
