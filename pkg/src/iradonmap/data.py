"""Training/test corpus construction: phantoms, PNG ingestion, sinogram simulation.

Ellipse coordinates are normalized: ``x`` and ``y`` run over ``[-1, 1]``
across the image width and height (``+y`` up), so a phantom rasterizes the
same way at any resolution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

from . import container
from .geometry import (GeometryError, ImagingGeometry, build_bp_table, dump_geometry_config,
                       load_geometry_config)
from .transform import project_interp, project_siddon

log = logging.getLogger(__name__)

BT601 = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class Ellipse:
    x0: float
    y0: float
    a: float
    b: float
    phi: float  # rotation, degrees counter-clockwise
    intensity: float


@dataclass
class PhantomSpec:
    ellipses: list = field(default_factory=list)
    clamp: tuple | None = None  # (lo, hi) applied after summation


# (intensity, a, b, x0, y0, phi) of the 10-ellipse head phantom, high-contrast
# intensities so the image lies in [0, 1]
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0),
    (0.1, 0.023, 0.023, 0.0, -0.605, 0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0),
]


def shepp_logan_spec() -> PhantomSpec:
    return PhantomSpec([Ellipse(x0, y0, a, b, phi, v) for v, a, b, x0, y0, phi in _SHEPP_LOGAN])


def random_phantom_spec(rng: np.random.Generator) -> PhantomSpec:
    """3 to 8 ellipses: one body ellipse plus smaller inserts, clamped to [0, 1]."""
    n = int(rng.integers(3, 9))
    ellipses = [Ellipse(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.45, 0.8),
                        rng.uniform(0.45, 0.8), rng.uniform(0, 180), rng.uniform(0.2, 0.6))]
    for _ in range(n - 1):
        r = rng.uniform(0, 0.5)
        ang = rng.uniform(0, 2 * np.pi)
        ellipses.append(Ellipse(r * np.cos(ang), r * np.sin(ang), rng.uniform(0.04, 0.3),
                                rng.uniform(0.04, 0.3), rng.uniform(0, 180), rng.uniform(-0.3, 0.5)))
    return PhantomSpec(ellipses, clamp=(0.0, 1.0))


def make_phantom(spec, geometry: ImagingGeometry, rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterize an ellipse phantom at pixel centers.

    ``spec`` is a :class:`PhantomSpec`, ``"shepp-logan"`` or ``"random"``
    (the latter needs ``rng``).
    """
    if isinstance(spec, str):
        if spec == "shepp-logan":
            spec = shepp_logan_spec()
        elif spec == "random":
            if rng is None:
                raise ValueError("random phantoms need an rng")
            spec = random_phantom_spec(rng)
        else:
            raise ValueError(f"unknown phantom {spec!r}")
    x, y = geometry.pixel_centers()
    xn = x / (geometry.n_x * geometry.pixel_size / 2)
    yn = y / (geometry.n_y * geometry.pixel_size / 2)
    image = np.zeros(geometry.image_shape)
    for e in spec.ellipses:
        c, s = np.cos(np.radians(e.phi)), np.sin(np.radians(e.phi))
        dx, dy = xn - e.x0, yn - e.y0
        inside = ((dx * c + dy * s) / e.a) ** 2 + ((dy * c - dx * s) / e.b) ** 2 <= 1.0
        image[inside] += e.intensity
    if spec.clamp is not None:
        image = np.clip(image, *spec.clamp)
    return image


def phantom_mass(spec: PhantomSpec, geometry: ImagingGeometry) -> float:
    """Analytic pixel-sum of an unclamped phantom: ``sum I * pi * a * b`` in pixel units."""
    scale = (geometry.n_x / 2) * (geometry.n_y / 2)
    return float(sum(e.intensity * np.pi * e.a * e.b for e in spec.ellipses) * scale)


def luminance(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * BT601[0] + rgb[..., 1] * BT601[1] + rgb[..., 2] * BT601[2]


def center_crop(image, shape) -> np.ndarray:
    """Keep the central ``shape`` window; pad symmetrically with zeros if smaller."""
    out = np.zeros(shape, dtype=np.float64)
    src, dst = [], []
    for have, want in zip(image.shape, shape):
        if have >= want:
            start = (have - want) // 2
            src.append(slice(start, start + want))
            dst.append(slice(0, want))
        else:
            start = (want - have) // 2
            src.append(slice(0, have))
            dst.append(slice(start, start + have))
    out[tuple(dst)] = image[tuple(src)]
    return out


def ingest_image(path, geometry: ImagingGeometry) -> np.ndarray:
    """Read a PNG, reduce to BT.601 luma in [0, 1] and center-crop to the geometry."""
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif im.mode == "LA":
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            else:
                arr = luminance(np.asarray(im.convert("RGB"))) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.size == 0:
        raise ValueError(f"{path} is an empty image")
    return center_crop(arr, geometry.image_shape)


def write_png(path, image) -> None:
    """8-bit grayscale PNG of an image already scaled to [0, 1]."""
    codes = np.floor(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)
    PILImage.fromarray(codes, mode="L").save(path)


def subsample_views(sino, geometry: ImagingGeometry, factor: int):
    """Keep views ``0, k, 2k, ...``, ``floor(n_views / k)`` of them.

    Returns the reduced sinogram and the matching geometry. 145 views with
    ``k = 2`` keep indices ``0..142`` (72 views).
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"subsampling factor must be >= 1, got {factor}")
    if factor > geometry.n_views:
        raise ValueError(f"factor {factor} exceeds the {geometry.n_views} available views")
    count = geometry.n_views // factor
    index = np.arange(count) * factor
    sino = np.asarray(sino)
    if sino.shape[-2:] != geometry.sino_shape:
        raise GeometryError(f"sinogram {sino.shape} does not match geometry {geometry.sino_shape}")
    return sino[..., index, :], geometry.with_angles(geometry.angles[index])


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


@dataclass
class DatasetManifest:
    """Ordered (image, sinogram, split) triples; paths are relative to ``root``."""

    root: Path
    entries: list
    geometry: ImagingGeometry
    projector: str = "siddon"
    seed: int = 0

    def __len__(self):
        return len(self.entries)

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def split(self, tag: str) -> list:
        return [e for e in self.entries if e[2] == tag]

    def ids(self, tag: str | None = None) -> list[str]:
        return [Path(e[0]).stem for e in self.entries if tag is None or e[2] == tag]

    def load(self, tag: str | None = None):
        """Stack ``(sinos, images)`` of one split (all entries if ``tag`` is None)."""
        rows = self.entries if tag is None else self.split(tag)
        sinos = np.zeros((len(rows),) + self.geometry.sino_shape, dtype=np.float32)
        images = np.zeros((len(rows),) + self.geometry.image_shape, dtype=np.float32)
        for n, (img_path, sino_path, _) in enumerate(rows):
            image = container.load_tensor(self.root / img_path)
            sino = container.load_tensor(self.root / sino_path)
            if image.shape != self.geometry.image_shape or sino.shape != self.geometry.sino_shape:
                raise GeometryError(f"{img_path}/{sino_path}: tensors do not match manifest geometry")
            images[n], sinos[n] = image, sino
        return sinos, images

    def write(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "geometry.cfg").write_text(dump_geometry_config(self.geometry))
        container.save_tensor(self.root / "angles.irdm", self.geometry.angles)
        lines = [f"# projector={self.projector}", f"# seed={self.seed}",
                 "# geometry=geometry.cfg", "# angles=angles.irdm",
                 "image_path\tsino_path\tsplit"]
        lines += ["\t".join(e) for e in self.entries]
        self.path.write_text("\n".join(lines) + "\n")
        return self.path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        root = path.parent
        meta, entries = {}, []
        for line in path.read_text().splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            elif line.strip() and line != "image_path\tsino_path\tsplit":
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"malformed manifest row: {line!r}")
                entries.append(tuple(parts))
        geometry = load_geometry_config(root / meta.get("geometry", "geometry.cfg"))
        if "angles" in meta:
            geometry = geometry.with_angles(container.load_tensor(root / meta["angles"]))
        for img_path, sino_path, _ in entries:
            for p in (img_path, sino_path):
                if not (root / p).is_file():
                    raise FileNotFoundError(f"manifest references missing file {p}")
        return cls(root, entries, geometry, meta.get("projector", "siddon"), int(meta.get("seed", 0)))


PROJECTORS = ("siddon", "interp")


def project(image, geometry: ImagingGeometry, projector: str = "siddon", table=None) -> np.ndarray:
    if projector == "siddon":
        return project_siddon(image, geometry)
    if projector == "interp":
        return project_interp(image, table or build_bp_table(geometry))
    raise ValueError(f"projector must be one of {PROJECTORS}, got {projector!r}")


def simulate_dataset(out_dir, geometry: ImagingGeometry, *, n_train: int = 0, n_val: int = 0,
                     n_test: int = 0, shepp_logan: bool = False, images: Sequence = (),
                     image_split: str = "test", projector: str = "siddon", seed: int = 0) -> DatasetManifest:
    """Generate phantoms (or ingest PNGs), project them and write the corpus.

    Random phantoms are drawn in split order (train, val, test) from one
    seeded generator; the Shepp-Logan phantom, if requested, is appended to
    the test split, followed by the ``images`` (arrays or PNG paths) tagged
    ``image_split``. Tensors are float32 IRDM1 files under ``images/`` and
    ``sinos/``. Items that fail are logged and left out of the manifest.
    """
    if projector not in PROJECTORS:
        raise ValueError(f"projector must be one of {PROJECTORS}, got {projector!r}")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    table = build_bp_table(geometry) if projector == "interp" else None

    jobs = []
    for tag, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(count):
            jobs.append((f"{tag}_{i:05d}", tag, random_phantom_spec(rng)))
    if shepp_logan:
        jobs.append(("shepp_logan", "test", shepp_logan_spec()))
    for i, item in enumerate(images):
        jobs.append((f"img_{i:05d}", image_split, item))

    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "sinos").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, tag, source in jobs:
        try:
            if isinstance(source, PhantomSpec):
                image = make_phantom(source, geometry)
            elif isinstance(source, (str, Path)):
                image = ingest_image(source, geometry)
            else:
                image = center_crop(np.asarray(source, dtype=np.float64), geometry.image_shape)
            sino = project(image, geometry, projector, table)
            img_rel, sino_rel = f"images/{name}.irdm", f"sinos/{name}.irdm"
            container.save_tensor(out_dir / img_rel, image.astype(np.float32))
            container.save_tensor(out_dir / sino_rel, sino.astype(np.float32))
        except (OSError, ValueError) as exc:
            log.error("skipping %s: %s", name, exc)
            continue
        entries.append((img_rel, sino_rel, tag))
    manifest = DatasetManifest(out_dir, entries, geometry, projector, seed)
    manifest.write()
    return manifest


def phantom_arrays(geometry: ImagingGeometry, count: int, seed: int, projector: str = "siddon"):
    """In-memory ``(sinos, images)`` float32 stacks of random phantoms."""
    rng = np.random.default_rng(seed)
    images = np.stack([make_phantom("random", geometry, rng) for _ in range(count)]) if count else \
        np.zeros((0,) + geometry.image_shape)
    table = build_bp_table(geometry) if projector == "interp" else None
    sinos = np.stack([project(im, geometry, projector, table) for im in images]) if count else \
        np.zeros((0,) + geometry.sino_shape)
    return sinos.astype(np.float32), images.astype(np.float32)
