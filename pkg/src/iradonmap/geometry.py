"""Parallel-beam coordinate conventions and the sinusoidal connectivity table.

Conventions (all lengths in the same unit as ``pixel_size``):

* pixel ``(i, j)`` (row ``i``, column ``j``) has its center at
  ``x = (j - (n_x-1)/2) * pixel_size`` and ``y = ((n_y-1)/2 - i) * pixel_size``;
* detector bin ``k`` has its center at ``s = (k - (n_det-1)/2) * det_spacing``;
* a pixel at ``(x, y)`` is seen at view ``theta`` on ``s = x cos(theta) + y sin(theta)``.

Flat pixel index is ``p = i * n_x + j`` (row-major). Everything indexed by
(view, pixel) is stored view-major with shape ``(n_views, n_y * n_x)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "GeometryError",
    "ImagingGeometry",
    "BpTable",
    "uniform_angles",
    "default_n_det",
    "sinusoid_s",
    "build_bp_table",
    "load_geometry_config",
    "dump_geometry_config",
]


class GeometryError(ValueError):
    """Invalid geometry, index out of range, or mismatched geometries."""


def uniform_angles(n_views: int) -> np.ndarray:
    """``theta_v = v * pi / n_views`` for ``v = 0..n_views-1`` (pi excluded)."""
    return np.arange(n_views, dtype=np.float64) * (np.pi / n_views)


def default_n_det(n_x: int, n_y: int, pixel_size: float = 1.0, det_spacing: float = 1.0) -> int:
    """Bin count covering the image diagonal, with every pixel center inside the bin-center span."""
    diagonal = math.ceil(math.hypot(n_x, n_y) * pixel_size / det_spacing)
    centers = math.ceil(math.hypot(n_x - 1, n_y - 1) * pixel_size / det_spacing - 1e-9) + 1
    return int(max(diagonal, centers))


@dataclass(frozen=True, eq=False)
class ImagingGeometry:
    n_x: int
    n_y: int
    n_views: int
    n_det: int
    pixel_size: float = 1.0
    det_spacing: float = 1.0
    angles: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("n_x", "n_y", "n_views", "n_det"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise GeometryError(f"{name} must be an integer >= 1, got {value!r}")
            object.__setattr__(self, name, int(value))
        for name in ("pixel_size", "det_spacing"):
            value = float(getattr(self, name))
            if not (value > 0 and math.isfinite(value)):
                raise GeometryError(f"{name} must be > 0, got {value!r}")
            object.__setattr__(self, name, value)
        angles = uniform_angles(self.n_views) if self.angles is None else self.angles
        angles = np.array(angles, dtype=np.float64).reshape(-1)
        if angles.size != self.n_views:
            raise GeometryError(f"expected {self.n_views} angles, got {angles.size}")
        if np.any(angles < 0) or np.any(angles >= np.pi) or not np.all(np.isfinite(angles)):
            raise GeometryError("angles must lie in [0, pi)")
        if np.any(np.diff(angles) <= 0):
            raise GeometryError("angles must be strictly increasing")
        angles.setflags(write=False)
        object.__setattr__(self, "angles", angles)

    @classmethod
    def desk(cls, n: int = 64, n_views: int = 90, n_det: int | None = None,
             pixel_size: float = 1.0) -> "ImagingGeometry":
        """Square image with a detector that covers the diagonal.

        Detector spacing equals ``pixel_size``; ``pixel_size=2/n`` puts the
        field of view on [-1, 1].
        """
        if n_det is None:
            n_det = default_n_det(n, n, pixel_size, pixel_size)
        return cls(n, n, n_views, n_det, pixel_size=pixel_size, det_spacing=pixel_size)

    @property
    def n_pixels(self) -> int:
        return self.n_x * self.n_y

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.n_y, self.n_x)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_views, self.n_det)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) coordinate grids of shape ``(n_y, n_x)``."""
        x = (np.arange(self.n_x) - (self.n_x - 1) / 2) * self.pixel_size
        y = ((self.n_y - 1) / 2 - np.arange(self.n_y)) * self.pixel_size
        return np.meshgrid(x, y)

    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.n_det) - (self.n_det - 1) / 2) * self.det_spacing

    def with_angles(self, angles) -> "ImagingGeometry":
        return ImagingGeometry(self.n_x, self.n_y, len(angles), self.n_det,
                               self.pixel_size, self.det_spacing, angles)

    def to_dict(self) -> dict:
        return {
            "n_x": self.n_x, "n_y": self.n_y, "n_views": self.n_views, "n_det": self.n_det,
            "pixel_size": self.pixel_size, "det_spacing": self.det_spacing,
            "angles": [float(a) for a in self.angles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImagingGeometry":
        return cls(d["n_x"], d["n_y"], d["n_views"], d["n_det"],
                   d.get("pixel_size", 1.0), d.get("det_spacing", 1.0), d.get("angles"))

    def __eq__(self, other):
        if not isinstance(other, ImagingGeometry):
            return NotImplemented
        return (
            (self.n_x, self.n_y, self.n_views, self.n_det, self.pixel_size, self.det_spacing)
            == (other.n_x, other.n_y, other.n_views, other.n_det, other.pixel_size, other.det_spacing)
            and np.array_equal(self.angles, other.angles)
        )

    def __hash__(self):
        return hash((self.n_x, self.n_y, self.n_views, self.n_det, self.pixel_size,
                     self.det_spacing, self.angles.tobytes()))

    def __repr__(self):
        return (f"ImagingGeometry(n_x={self.n_x}, n_y={self.n_y}, n_views={self.n_views}, "
                f"n_det={self.n_det}, pixel_size={self.pixel_size}, det_spacing={self.det_spacing})")


def sinusoid_s(geometry: ImagingGeometry, pixel: tuple[int, int], view: int) -> float:
    """Detector coordinate ``s`` at which ``pixel = (i, j)`` is seen from ``view``."""
    i, j = pixel
    if not (0 <= i < geometry.n_y and 0 <= j < geometry.n_x):
        raise GeometryError(f"pixel {pixel} outside {geometry.image_shape} grid")
    if not 0 <= view < geometry.n_views:
        raise GeometryError(f"view {view} outside 0..{geometry.n_views - 1}")
    x = (j - (geometry.n_x - 1) / 2) * geometry.pixel_size
    y = ((geometry.n_y - 1) / 2 - i) * geometry.pixel_size
    theta = geometry.angles[view]
    return x * math.cos(theta) + y * math.sin(theta)


@dataclass(frozen=True, eq=False)
class BpTable:
    """Pixel-to-sinogram connectivity: one two-bin linear footprint per (view, pixel).

    ``k_lo``, ``t`` and ``valid`` all have shape ``(n_views, n_pixels)``. The
    upper bin is ``k_hi = min(k_lo + 1, n_det - 1)``; invalid entries carry
    ``k_lo = 0``, ``t = 0`` and must be skipped.
    """

    geometry: ImagingGeometry
    k_lo: np.ndarray
    t: np.ndarray
    valid: np.ndarray

    @property
    def k_hi(self) -> np.ndarray:
        return np.minimum(self.k_lo + 1, self.geometry.n_det - 1)

    @property
    def n_entries(self) -> int:
        return self.k_lo.size

    @property
    def n_invalid(self) -> int:
        return int(self.valid.size - np.count_nonzero(self.valid))

    def s_values(self) -> np.ndarray:
        """Detector coordinates recovered from the stored (k_lo, t)."""
        g = self.geometry
        return (self.k_lo + self.t - (g.n_det - 1) / 2) * g.det_spacing

    @cached_property
    def _interp64(self) -> sp.csr_matrix:
        g = self.geometry
        n_rows = g.n_views * g.n_pixels
        rows = np.arange(n_rows)
        offset = (np.arange(g.n_views) * g.n_det)[:, None]
        w_lo = np.where(self.valid, 1.0 - self.t, 0.0).ravel()
        w_hi = np.where(self.valid, self.t, 0.0).ravel()
        mat = sp.csr_matrix(
            (np.concatenate([w_lo, w_hi]),
             (np.concatenate([rows, rows]),
              np.concatenate([(self.k_lo + offset).ravel(), (self.k_hi + offset).ravel()]))),
            shape=(n_rows, g.n_views * g.n_det),
        )
        mat.sum_duplicates()
        return mat

    def interp_matrix(self, dtype=np.float64) -> sp.csr_matrix:
        """Sparse gather operator mapping a flat sinogram to (view, pixel) samples.

        Row ``v * n_pixels + p`` holds the weights ``(1-t, t)`` at columns
        ``v * n_det + k_lo`` and ``v * n_det + k_hi``.
        """
        return self._cached(dtype)[0]

    def scatter_matrix(self, dtype=np.float64) -> sp.csr_matrix:
        """Transpose of :meth:`interp_matrix`, stored in CSR for fast products."""
        return self._cached(dtype)[1]

    def _cached(self, dtype):
        cache = self.__dict__.setdefault("_by_dtype", {})
        dtype = np.dtype(dtype)
        if dtype not in cache:
            cache[dtype] = (self._interp64.astype(dtype), self._interp64.T.tocsr().astype(dtype))
        return cache[dtype]


def build_bp_table(geometry: ImagingGeometry) -> BpTable:
    x, y = geometry.pixel_centers()
    x, y = x.ravel(), y.ravel()
    cos = np.cos(geometry.angles)[:, None]
    sin = np.sin(geometry.angles)[:, None]
    s = x[None, :] * cos + y[None, :] * sin
    u = s / geometry.det_spacing + (geometry.n_det - 1) / 2
    last = geometry.n_det - 1
    valid = (u >= 0) & (u <= last)
    k_lo = np.floor(np.where(valid, u, 0.0)).astype(np.int64)
    if last > 0:
        k_lo = np.minimum(k_lo, last - 1)
    t = np.where(valid, u - k_lo, 0.0)
    return BpTable(geometry, k_lo, t, valid)


_GEOMETRY_KEYS = {"n_x", "n_y", "pixel_size", "n_views", "n_det", "det_spacing", "angle_mode"}


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise GeometryError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def geometry_from_mapping(values: dict) -> ImagingGeometry:
    """Build a geometry from config values; missing keys fall back to desk defaults.

    ``angle_mode`` is ``uniform`` (default) or ``subsample:<base_views>:<factor>``,
    the latter reproducing the angle set left by :func:`iradonmap.data.subsample_views`.
    """
    unknown = set(values) - _GEOMETRY_KEYS
    if unknown:
        raise GeometryError(f"unknown geometry keys: {sorted(unknown)}")
    try:
        n_x = int(values.get("n_x", 64))
        n_y = int(values.get("n_y", n_x))
        pixel_size = float(values.get("pixel_size", 1.0))
        det_spacing = float(values.get("det_spacing", 1.0))
        n_det = int(values.get("n_det", default_n_det(n_x, n_y, pixel_size, det_spacing)))
        mode = str(values.get("angle_mode", "uniform"))
        if mode == "uniform":
            n_views = int(values.get("n_views", 90))
            angles = uniform_angles(n_views)
        elif mode.startswith("subsample:"):
            _, base, factor = mode.split(":")
            base, factor = int(base), int(factor)
            angles = uniform_angles(base)[::factor][: base // factor]
            n_views = int(values.get("n_views", len(angles)))
            if n_views > len(angles):
                raise GeometryError(f"angle_mode {mode} yields only {len(angles)} views")
            angles = angles[:n_views]
        else:
            raise GeometryError(f"unknown angle_mode {mode!r}")
    except ValueError as exc:
        if isinstance(exc, GeometryError):
            raise
        raise GeometryError(str(exc)) from exc
    return ImagingGeometry(n_x, n_y, n_views, n_det, pixel_size, det_spacing, angles)


def load_geometry_config(path) -> ImagingGeometry:
    return geometry_from_mapping(parse_key_values(Path(path).read_text()))


def dump_geometry_config(geometry: ImagingGeometry, angle_mode: str = "uniform") -> str:
    lines = [
        f"n_x = {geometry.n_x}",
        f"n_y = {geometry.n_y}",
        f"pixel_size = {geometry.pixel_size!r}",
        f"n_views = {geometry.n_views}",
        f"n_det = {geometry.n_det}",
        f"det_spacing = {geometry.det_spacing!r}",
        f"angle_mode = {angle_mode}",
    ]
    return "\n".join(lines) + "\n"
