"""Classical parallel-beam Radon transform and filtered back-projection.

Images are arrays of shape ``(n_y, n_x)`` and sinograms arrays of shape
``(n_views, n_det)``; every operator also accepts a leading batch axis.
Two projectors are provided: :func:`project_siddon` computes exact line
integrals and is used to simulate measurements, :func:`project_interp` is
pixel-driven and is the exact adjoint of :func:`backproject`::

    <project_interp(x), y> * pi / (n_views * pixel_size) == <x, backproject(y)>
"""
from __future__ import annotations

import numpy as np

from .geometry import BpTable, GeometryError, ImagingGeometry

__all__ = [
    "project_interp",
    "project_siddon",
    "ramlak_kernel",
    "ramp_filter",
    "ramp_matrix",
    "backproject",
    "fbp",
    "adjoint_scale",
]


def _check(array, shape, what) -> np.ndarray:
    array = np.asarray(array)
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float64)
    if array.shape[-2:] != tuple(shape) or array.ndim not in (2, 3):
        raise GeometryError(f"{what} shape {array.shape} does not match geometry {tuple(shape)}")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{what} contains non-finite values")
    return array


def adjoint_scale(geometry: ImagingGeometry) -> float:
    """Factor ``c`` with ``c * <project_interp(x), y> == <x, backproject(y)>``."""
    return np.pi / (geometry.n_views * geometry.pixel_size)


def project_interp(image, table: BpTable) -> np.ndarray:
    """Pixel-driven projection: splat ``f * pixel_size`` onto the two nearest bins."""
    g = table.geometry
    image = _check(image, g.image_shape, "image")
    flat = image.reshape(-1, g.n_pixels) * g.pixel_size
    tiled = np.broadcast_to(flat[:, None, :], (flat.shape[0], g.n_views, g.n_pixels))
    tiled = tiled.reshape(flat.shape[0], -1)
    sino = (table.scatter_matrix(image.dtype) @ tiled.T).T
    return sino.reshape(image.shape[:-2] + g.sino_shape).astype(image.dtype, copy=False)


def _siddon_view(flat_image, geometry: ImagingGeometry, theta: float) -> np.ndarray:
    if min(abs(np.cos(theta)), abs(np.sin(theta))) < 1e-12:
        # axis-aligned rays may run exactly along pixel edges: average both one-sided limits
        delta = 1e-7 * geometry.pixel_size
        s = geometry.bin_centers()
        return 0.5 * (_siddon_rays(flat_image, geometry, theta, s - delta)
                      + _siddon_rays(flat_image, geometry, theta, s + delta))
    return _siddon_rays(flat_image, geometry, theta, geometry.bin_centers())


def _siddon_rays(flat_image, geometry: ImagingGeometry, theta: float, s: np.ndarray) -> np.ndarray:
    g = geometry
    half_w = g.n_x * g.pixel_size / 2
    half_h = g.n_y * g.pixel_size / 2
    c, sn = np.cos(theta), np.sin(theta)
    dx, dy = -sn, c
    px, py = s * c, s * sn

    with np.errstate(divide="ignore", invalid="ignore"):
        lo = np.full(s.shape, -np.inf)
        hi = np.full(s.shape, np.inf)
        if abs(dx) > 1e-12:
            a, b = (-half_w - px) / dx, (half_w - px) / dx
            lo, hi = np.maximum(lo, np.minimum(a, b)), np.minimum(hi, np.maximum(a, b))
        else:
            outside = np.abs(px) >= half_w
            lo[outside], hi[outside] = 0.0, 0.0
        if abs(dy) > 1e-12:
            a, b = (-half_h - py) / dy, (half_h - py) / dy
            lo, hi = np.maximum(lo, np.minimum(a, b)), np.minimum(hi, np.maximum(a, b))
        else:
            outside = np.abs(py) >= half_h
            lo[outside], hi[outside] = 0.0, 0.0
    hit = hi > lo
    lo, hi = np.where(hit, lo, 0.0), np.where(hit, hi, 0.0)

    planes = []
    if abs(dx) > 1e-12:
        xs = (np.arange(g.n_x + 1) * g.pixel_size - half_w)
        planes.append((xs[None, :] - px[:, None]) / dx)
    if abs(dy) > 1e-12:
        ys = (np.arange(g.n_y + 1) * g.pixel_size - half_h)
        planes.append((ys[None, :] - py[:, None]) / dy)
    alphas = np.concatenate(planes + [lo[:, None], hi[:, None]], axis=1)
    alphas = np.sort(np.clip(alphas, lo[:, None], hi[:, None]), axis=1)

    lengths = np.diff(alphas, axis=1)
    mid = 0.5 * (alphas[:, 1:] + alphas[:, :-1])
    mx = px[:, None] + mid * dx
    my = py[:, None] + mid * dy
    col = np.clip(np.floor((mx + half_w) / g.pixel_size).astype(np.int64), 0, g.n_x - 1)
    row = np.clip(np.floor((half_h - my) / g.pixel_size).astype(np.int64), 0, g.n_y - 1)
    return np.sum(flat_image[row * g.n_x + col] * lengths, axis=1)


def project_siddon(image, geometry: ImagingGeometry) -> np.ndarray:
    """Exact line-integral projector (intersection length times pixel value).

    One ray per detector bin center, perpendicular to the detector. Each ray
    is clipped to the image box and split at every pixel boundary it crosses.
    """
    image = _check(image, geometry.image_shape, "image")
    batch = image.reshape(-1, geometry.n_pixels)
    out = np.empty((batch.shape[0],) + geometry.sino_shape, dtype=np.float64)
    for n, flat in enumerate(batch):
        flat = flat.astype(np.float64)
        for v, theta in enumerate(geometry.angles):
            out[n, v] = _siddon_view(flat, geometry, theta)
    return out.reshape(image.shape[:-2] + geometry.sino_shape).astype(image.dtype, copy=False)


def ramlak_kernel(offsets, det_spacing: float = 1.0) -> np.ndarray:
    """Discrete Ram-Lak taps ``h[n]`` at integer offsets ``n``.

    ``h[0] = 1/(4 d^2)``, ``h[n] = -1/(pi^2 n^2 d^2)`` for odd ``n``, else 0.
    """
    n = np.asarray(offsets, dtype=np.int64)
    h = np.zeros(n.shape, dtype=np.float64)
    odd = (n % 2) != 0
    h[odd] = -1.0 / (np.pi ** 2 * n[odd].astype(np.float64) ** 2)
    h[n == 0] = 0.25
    return h / det_spacing ** 2


def _padded_length(n_det: int) -> int:
    length = 2
    while length < 2 * n_det:
        length *= 2
    return length


def ramp_filter(sino, det_spacing: float = 1.0) -> np.ndarray:
    """Ram-Lak filtering of every detector row, by zero-padded FFT convolution.

    Computes ``q[k] = d * sum_k' h[k - k'] p[k']`` (``d`` the detector
    spacing, so the sum is a Riemann approximation of the continuous
    convolution). Padding to a power of two >= ``2 n_det`` rules out wrap-around.
    """
    sino = np.asarray(sino)
    if not np.issubdtype(sino.dtype, np.floating):
        sino = sino.astype(np.float64)
    if not np.all(np.isfinite(sino)):
        raise ValueError("sinogram contains non-finite values")
    n_det = sino.shape[-1]
    length = _padded_length(n_det)
    idx = np.arange(length)
    h = ramlak_kernel(np.where(idx <= length // 2, idx, idx - length), det_spacing)
    spectrum = np.fft.rfft(h)  # real and even: samples |omega|-like response
    q = np.fft.irfft(np.fft.rfft(sino.astype(np.float64), n=length, axis=-1) * spectrum,
                     n=length, axis=-1)[..., :n_det]
    return (q * det_spacing).astype(sino.dtype, copy=False)


def ramp_matrix(n_det: int, det_spacing: float = 1.0) -> np.ndarray:
    """Dense matrix ``W`` with ``row @ W.T == ramp_filter(row)`` (Toeplitz form)."""
    k = np.arange(n_det)
    return ramlak_kernel(k[:, None] - k[None, :], det_spacing) * det_spacing


def backproject(sino, table: BpTable) -> np.ndarray:
    """``f(p) = pi/n_views * sum_v [(1-t) q(k_lo, v) + t q(k_hi, v)]`` over valid entries."""
    g = table.geometry
    sino = _check(sino, g.sino_shape, "sinogram")
    flat = sino.reshape(-1, g.n_views * g.n_det)
    samples = (table.interp_matrix(sino.dtype) @ flat.T).T
    image = samples.reshape(-1, g.n_views, g.n_pixels).sum(axis=1) * (np.pi / g.n_views)
    return image.reshape(sino.shape[:-2] + g.image_shape).astype(sino.dtype, copy=False)


def fbp(sino, table: BpTable) -> np.ndarray:
    """Filtered back-projection: :func:`backproject` of :func:`ramp_filter`."""
    return backproject(ramp_filter(sino, table.geometry.det_spacing), table)
