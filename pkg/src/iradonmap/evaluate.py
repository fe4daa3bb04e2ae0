"""Image-quality metrics and the view-count sweep (FBP vs iRadonMap)."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .data import subsample_views
from .geometry import GeometryError, ImagingGeometry
from .layers import IRadonMap
from .transform import fbp

DISPLAY_WINDOW = (0.0, 0.4)
DIFF_WINDOW = (-0.08, 0.08)
METHODS = ("fbp", "iradonmap")


def mse(x, ref) -> float:
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    return float(np.mean((x - ref) ** 2))


def psnr(x, ref, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; ``inf`` when the images are identical."""
    if not peak > 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    err = mse(x, ref)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / err)


def window_map(x, lo: float, hi: float, bits: int = 8) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and map affinely onto ``0..2**bits - 1``, rounding half up."""
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got [{lo}, {hi}]")
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    top = (1 << bits) - 1
    scaled = (np.clip(np.asarray(x, dtype=np.float64), lo, hi) - lo) / (hi - lo) * top
    return np.floor(scaled + 0.5).astype(np.uint8 if bits == 8 else np.uint16)


def save_display(path, codes) -> None:
    """Write window-mapped codes as PNG (8/16-bit) or binary PGM (by suffix)."""
    path = Path(path)
    codes = np.asarray(codes)
    if path.suffix.lower() == ".pgm":
        maxval = 255 if codes.dtype == np.uint8 else 65535
        payload = codes.astype(">u2" if maxval > 255 else np.uint8).tobytes()
        header = f"P5\n{codes.shape[1]} {codes.shape[0]}\n{maxval}\n".encode("ascii")
        path.write_bytes(header + payload)
    elif codes.dtype == np.uint8:
        PILImage.fromarray(codes, mode="L").save(path)
    else:
        PILImage.fromarray(codes.astype(np.uint16)).save(path)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return np.frombuffer(parts[4], dtype=dtype, count=w * h).reshape(h, w).astype(
        np.uint8 if maxval < 256 else np.uint16)


@dataclass(frozen=True)
class ReportRow:
    id: str
    n_views: int
    method: str
    mse: float
    psnr: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def means(self) -> dict:
        """``{(n_views, method): (mean mse, mean psnr)}``."""
        acc = defaultdict(list)
        for r in self.rows:
            acc[(r.n_views, r.method)].append(r)
        return {k: (float(np.mean([r.mse for r in v])), float(np.mean([r.psnr for r in v])))
                for k, v in sorted(acc.items())}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "n_views", "method", "mse", "psnr"])
            for r in self.rows:
                writer.writerow([r.id, r.n_views, r.method, repr(r.mse), repr(r.psnr)])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            rows = [ReportRow(d["id"], int(d["n_views"]), d["method"], float(d["mse"]), float(d["psnr"]))
                    for d in csv.DictReader(fh)]
        return cls(rows)


def _model_for(models: Sequence[IRadonMap], geometry: ImagingGeometry) -> IRadonMap:
    for model in models:
        if model.geometry == geometry:
            return model
    have = ", ".join(f"{m.geometry.n_views} views" for m in models) or "none"
    raise GeometryError(
        f"no checkpoint matches the {geometry.n_views}-view geometry (have: {have}); "
        "a separate model must be trained for each view count")


def compare_sweep(ids: Sequence[str], sinos, images, geometry: ImagingGeometry,
                  models: Sequence[IRadonMap], factors: Sequence[int], out_dir=None,
                  window=DISPLAY_WINDOW, diff_window=DIFF_WINDOW, peak: float = 1.0) -> EvalReport:
    """Reconstruct every sample at every subsampling factor with FBP and iRadonMap.

    ``sinos``/``images`` hold the full-view data of ``geometry``; each factor
    needs a model trained for the subsampled geometry. With ``out_dir``
    set, per-panel PNGs ``{id}_{views}_{fbp|iradonmap|diff-fbp|diff-iradonmap}.png``,
    ``{id}_reference.png`` and a grid ``{id}_grid.png`` (one row per view
    count: reference | fbp | iradonmap | diff fbp | diff iradonmap) are written.
    """
    report = EvalReport()
    if len(ids) == 0:
        return report
    plan = []
    for factor in factors:
        sub, sub_geometry = subsample_views(sinos, geometry, factor)
        plan.append((sub, sub_geometry, _model_for(models, sub_geometry)))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    grids = defaultdict(list)
    for sub, sub_geometry, model in plan:
        views = sub_geometry.n_views
        recon_fbp = fbp(np.asarray(sub, dtype=np.float64), model.table)
        recon_net = np.stack([model(s) for s in sub])
        for n, sample_id in enumerate(ids):
            ref = images[n]
            panels = [window_map(ref, *window)]
            for method, recon in (("fbp", recon_fbp[n]), ("iradonmap", recon_net[n])):
                report.rows.append(ReportRow(sample_id, views, method, mse(recon, ref), psnr(recon, ref, peak)))
                panels.append(window_map(recon, *window))
            diffs = [window_map(ref - r[n], *diff_window) for r in (recon_fbp, recon_net)]
            panels += diffs
            if out_dir is not None:
                save_display(out_dir / f"{sample_id}_reference.png", panels[0])
                for method, codes in zip(("fbp", "iradonmap", "diff-fbp", "diff-iradonmap"), panels[1:]):
                    save_display(out_dir / f"{sample_id}_{views}_{method}.png", codes)
                grids[sample_id].append(np.concatenate(panels, axis=1))
    if out_dir is not None:
        for sample_id, rows in grids.items():
            save_display(out_dir / f"{sample_id}_grid.png", np.concatenate(rows, axis=0))
        report.to_csv(out_dir / "report.csv")
    return report
