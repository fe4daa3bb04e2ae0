"""Differentiable building blocks of the iRadonMap network.

Every layer comes as a ``*_fwd`` / ``*_bwd`` pair in the usual
forward-with-cache style: ``out, cache = layer_fwd(...)`` and
``grads = layer_bwd(dout, cache)``. Batched tensors are used throughout:

* sinograms ``(N, n_views, n_det)``
* images / feature maps ``(N, C, n_y, n_x)``

:class:`IRadonMap` chains filter -> sinusoidal back-projection -> residual
refiner and owns the learnable parameters.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .geometry import BpTable, GeometryError, ImagingGeometry, build_bp_table
from .transform import ramp_matrix

BP_GRANULARITIES = ("pixel_view", "view", "global")


def _need_cache(cache, name):
    if cache is None:
        raise ValueError(f"{name}: forward cache missing, run the forward pass first")


# ---------------------------------------------------------------------------
# learnable filtering layer
# ---------------------------------------------------------------------------

def filter_layer_fwd(p, W, b):
    """Fully connected filter along the detector axis, shared by all views: ``p @ W.T + b``."""
    if p.shape[-1] != W.shape[1] or W.shape[0] != b.shape[0]:
        raise GeometryError(f"filter shapes disagree: p {p.shape}, W {W.shape}, b {b.shape}")
    return p @ W.T + b, (p, W)


def filter_layer_bwd(dout, cache):
    _need_cache(cache, "filter_layer_bwd")
    p, W = cache
    d = dout.reshape(-1, dout.shape[-1])
    dW = d.T @ p.reshape(-1, p.shape[-1])
    db = d.sum(axis=0)
    dp = dout @ W
    return dp, dW, db


# ---------------------------------------------------------------------------
# sinusoidal back-projection layer
# ---------------------------------------------------------------------------

def sinobp_fwd(q, table: BpTable, w):
    """``f(p) = sum_v w[v, p] * [(1-t) q(k_lo) + t q(k_hi)]`` over valid entries.

    ``w`` has shape ``(n_views, n_pixels)``, ``(n_views, 1)`` or ``(1, 1)``
    (per-connection, per-view or global weights). Returns ``(N, n_pixels)``.
    """
    g = table.geometry
    if q.shape[-2:] != g.sino_shape:
        raise GeometryError(f"sinogram {q.shape} does not match table {g.sino_shape}")
    if w.ndim != 2 or w.shape[0] not in (1, g.n_views) or w.shape[1] not in (1, g.n_pixels):
        raise GeometryError(f"back-projection weights {w.shape} incompatible with table")
    n = q.shape[0]
    samples = (table.interp_matrix(q.dtype) @ q.reshape(n, -1).T).T
    samples = samples.reshape(n, g.n_views, g.n_pixels)
    out = np.einsum("nvp,vp->np", samples, np.broadcast_to(w, (g.n_views, g.n_pixels)))
    return out, (samples, w, table)


def sinobp_bwd(dout, cache):
    """Gradients w.r.t. ``q`` (scatter through the same footprint) and ``w``."""
    _need_cache(cache, "sinobp_bwd")
    samples, w, table = cache
    g = table.geometry
    n = dout.shape[0]
    dw = np.einsum("np,nvp->vp", dout, samples)
    dw = dw.sum(axis=tuple(ax for ax in (0, 1) if w.shape[ax] == 1), keepdims=True)
    dsamples = dout[:, None, :] * np.broadcast_to(w, (g.n_views, g.n_pixels))[None]
    dq = (table.scatter_matrix(dout.dtype) @ dsamples.reshape(n, -1).T).T
    return dq.reshape(n, g.n_views, g.n_det), dw


# ---------------------------------------------------------------------------
# convolution and residual refiner
# ---------------------------------------------------------------------------

def conv2d_fwd(x, kernel, bias, padding=1):
    """Cross-correlation, stride 1, zero padding. ``x`` is ``(N, C, H, W)``, ``kernel`` is ``(O, C, kh, kw)``."""
    n, c, h, wd = x.shape
    o, c_k, kh, kw = kernel.shape
    if c != c_k or bias.shape != (o,):
        raise GeometryError(f"conv shapes disagree: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ kernel.reshape(o, -1).T + bias
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, kernel, padding)


def conv2d_bwd(dout, cache):
    _need_cache(cache, "conv2d_bwd")
    cols, x_shape, kernel, padding = cache
    n, c, h, wd = x_shape
    o, _, kh, kw = kernel.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dkernel = (d.T @ cols).reshape(kernel.shape)
    dbias = d.sum(axis=0)
    dcols = (d @ kernel.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(dx), dkernel, dbias


def relu_fwd(x):
    return np.maximum(x, 0), x


def relu_bwd(dout, cache):
    return dout * (cache > 0)


def resblock_fwd(x, k1, b1, k2, b2):
    """``y = x + conv2(relu(conv1(relu(x))))``; no normalization."""
    a0, c0 = relu_fwd(x)
    h1, c1 = conv2d_fwd(a0, k1, b1)
    a1, c2 = relu_fwd(h1)
    h2, c3 = conv2d_fwd(a1, k2, b2)
    return x + h2, (c0, c1, c2, c3)


def resblock_bwd(dout, cache):
    _need_cache(cache, "resblock_bwd")
    c0, c1, c2, c3 = cache
    da1, dk2, db2 = conv2d_bwd(dout, c3)
    dh1 = relu_bwd(da1, c2)
    da0, dk1, db1 = conv2d_bwd(dh1, c1)
    dx = dout + relu_bwd(da0, c0)
    return dx, dk1, db1, dk2, db2


def refiner_names(blocks: int) -> list[str]:
    names = ["stem.weight", "stem.bias"]
    for i in range(blocks):
        names += [f"block{i}.conv1.weight", f"block{i}.conv1.bias",
                  f"block{i}.conv2.weight", f"block{i}.conv2.bias"]
    return names + ["head.weight", "head.bias"]


def _n_blocks(params) -> int:
    return sum(1 for k in params if k.endswith(".conv1.weight"))


def refiner_fwd(x, params):
    """``out = x + head(blocks(relu(stem(x))))`` with ``x`` shaped ``(N, 1, H, W)``.

    ``params`` maps the names from :func:`refiner_names` (without the
    ``refiner.`` prefix) to arrays.
    """
    h, c_stem = conv2d_fwd(x, params["stem.weight"], params["stem.bias"])
    h, c_relu = relu_fwd(h)
    block_caches = []
    for i in range(_n_blocks(params)):
        h, cb = resblock_fwd(h, params[f"block{i}.conv1.weight"], params[f"block{i}.conv1.bias"],
                             params[f"block{i}.conv2.weight"], params[f"block{i}.conv2.bias"])
        block_caches.append(cb)
    r, c_head = conv2d_fwd(h, params["head.weight"], params["head.bias"])
    return x + r, (c_stem, c_relu, block_caches, c_head)


def refiner_bwd(dout, cache):
    _need_cache(cache, "refiner_bwd")
    c_stem, c_relu, block_caches, c_head = cache
    grads = {}
    dh, grads["head.weight"], grads["head.bias"] = conv2d_bwd(dout, c_head)
    for i in reversed(range(len(block_caches))):
        dh, *g = resblock_bwd(dh, block_caches[i])
        for key, val in zip(("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"), g):
            grads[f"block{i}.{key}"] = val
    dh = relu_bwd(dh, c_relu)
    dx, grads["stem.weight"], grads["stem.bias"] = conv2d_bwd(dh, c_stem)
    return dout + dx, grads


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

def _bp_shape(geometry, granularity):
    if granularity not in BP_GRANULARITIES:
        raise ValueError(f"bp_granularity must be one of {BP_GRANULARITIES}, got {granularity!r}")
    return {"pixel_view": (geometry.n_views, geometry.n_pixels),
            "view": (geometry.n_views, 1), "global": (1, 1)}[granularity]


def canonical_params(geometry: ImagingGeometry, channels=32, blocks=4, bp_granularity="pixel_view",
                     dtype=np.float32, seed=0) -> "OrderedDict[str, np.ndarray]":
    """Parameters that make the untrained network reproduce FBP exactly.

    Filter = Ram-Lak Toeplitz matrix, zero bias; back-projection weights
    ``pi / n_views``; stem and block convolutions He-normal; head zero.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params = OrderedDict()
    params["filter.W"] = ramp_matrix(geometry.n_det, geometry.det_spacing)
    params["filter.b"] = np.zeros(geometry.n_det)
    params["sinobp.w"] = np.full(_bp_shape(geometry, bp_granularity), np.pi / geometry.n_views)

    def he(o, c):
        return rng.standard_normal((o, c, 3, 3)) * np.sqrt(2.0 / (c * 9))

    params["refiner.stem.weight"] = he(channels, 1)
    params["refiner.stem.bias"] = np.zeros(channels)
    for i in range(blocks):
        params[f"refiner.block{i}.conv1.weight"] = he(channels, channels)
        params[f"refiner.block{i}.conv1.bias"] = np.zeros(channels)
        params[f"refiner.block{i}.conv2.weight"] = he(channels, channels)
        params[f"refiner.block{i}.conv2.bias"] = np.zeros(channels)
    params["refiner.head.weight"] = np.zeros((1, channels, 3, 3))
    params["refiner.head.bias"] = np.zeros(1)
    return OrderedDict((k, v.astype(dtype)) for k, v in params.items())


class IRadonMap:
    """Filter layer, sinusoidal back-projection layer and residual refiner.

    ``params`` is an ordered dict; its key order is the canonical flat
    ordering used by the optimizer and by checkpoints.
    """

    def __init__(self, geometry: ImagingGeometry, channels=32, blocks=4,
                 bp_granularity="pixel_view", dtype=np.float32, seed=0, params=None):
        self.geometry = geometry
        self.table = build_bp_table(geometry)
        self.channels = int(channels)
        self.blocks = int(blocks)
        self.bp_granularity = bp_granularity
        self.dtype = np.dtype(dtype)
        self.seed = seed
        expected = canonical_params(geometry, channels, blocks, bp_granularity, dtype, seed)
        if params is None:
            self.params = expected
        else:
            if list(params) != list(expected):
                raise GeometryError("parameter names/order do not match the model configuration")
            for k, v in params.items():
                if v.shape != expected[k].shape:
                    raise GeometryError(f"{k}: shape {v.shape}, expected {expected[k].shape}")
            self.params = OrderedDict((k, np.asarray(v, dtype=self.dtype)) for k, v in params.items())

    # -- configuration ------------------------------------------------------
    def config(self) -> dict:
        return {"geometry": self.geometry.to_dict(), "channels": self.channels, "blocks": self.blocks,
                "bp_granularity": self.bp_granularity, "dtype": self.dtype.name, "seed": self.seed}

    @classmethod
    def from_config(cls, config: dict, params=None) -> "IRadonMap":
        return cls(ImagingGeometry.from_dict(config["geometry"]), config["channels"], config["blocks"],
                   config["bp_granularity"], config["dtype"], config.get("seed", 0), params)

    def param_counts(self) -> "OrderedDict[str, int]":
        return OrderedDict((k, int(v.size)) for k, v in self.params.items())

    @property
    def n_params(self) -> int:
        return sum(self.param_counts().values())

    # -- flat addressing ----------------------------------------------------
    def flatten(self, tensors=None) -> np.ndarray:
        tensors = self.params if tensors is None else tensors
        return np.concatenate([np.ravel(tensors[k]) for k in self.params])

    def unflatten(self, flat) -> "OrderedDict[str, np.ndarray]":
        flat = np.asarray(flat)
        if flat.size != self.n_params:
            raise ValueError(f"flat vector has {flat.size} entries, model has {self.n_params}")
        out, start = OrderedDict(), 0
        for k, v in self.params.items():
            out[k] = flat[start:start + v.size].reshape(v.shape).astype(self.dtype, copy=True)
            start += v.size
        return out

    def set_flat(self, flat) -> None:
        self.params = self.unflatten(flat)

    # -- forward / backward ---------------------------------------------------
    def _refiner_params(self):
        return {k[len("refiner."):]: v for k, v in self.params.items() if k.startswith("refiner.")}

    def forward(self, sino):
        """Returns reconstructions ``(N, n_y, n_x)`` (or ``(n_y, n_x)``) and a cache."""
        sino = np.asarray(sino, dtype=self.dtype)
        single = sino.ndim == 2
        if single:
            sino = sino[None]
        q, c_filter = filter_layer_fwd(sino, self.params["filter.W"], self.params["filter.b"])
        f, c_bp = sinobp_fwd(q, self.table, self.params["sinobp.w"])
        x = f.reshape(-1, 1, *self.geometry.image_shape)
        out, c_ref = refiner_fwd(x, self._refiner_params())
        out = out[:, 0]
        return (out[0] if single else out), (single, c_filter, c_bp, c_ref)

    def backward(self, dout, cache):
        """Gradients for every parameter (ordered like ``params``) and for the input sinogram."""
        _need_cache(cache, "IRadonMap.backward")
        single, c_filter, c_bp, c_ref = cache
        dout = np.asarray(dout, dtype=self.dtype)
        if single:
            dout = dout[None]
        dx, g_ref = refiner_bwd(dout[:, None], c_ref)
        dq, dw = sinobp_bwd(dx.reshape(dx.shape[0], -1), c_bp)
        dsino, dW, db = filter_layer_bwd(dq, c_filter)
        grads = OrderedDict()
        grads["filter.W"], grads["filter.b"], grads["sinobp.w"] = dW, db, dw
        for k, v in g_ref.items():
            grads["refiner." + k] = v
        grads = OrderedDict((k, grads[k]) for k in self.params)
        return grads, (dsino[0] if single else dsino)

    def __call__(self, sino):
        return self.forward(sino)[0]

    # -- persistence ----------------------------------------------------------
    def to_tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict(("param/" + k, v) for k, v in self.params.items())
        out["model/config"] = container.encode_json(self.config())
        return out

    @classmethod
    def from_tensors(cls, tensors) -> "IRadonMap":
        if "model/config" not in tensors:
            raise container.ContainerError("archive has no model/config record")
        params = OrderedDict((k[len("param/"):], v) for k, v in tensors.items() if k.startswith("param/"))
        return cls.from_config(container.decode_json(tensors["model/config"]), params)

    def save(self, path) -> None:
        container.save_archive(path, self.to_tensors())

    @classmethod
    def load(cls, path) -> "IRadonMap":
        return cls.from_tensors(container.load_archive(path))


def fully_connected_bp_count(geometry: ImagingGeometry) -> int:
    """Weights a dense sinogram-to-image layer would need."""
    return geometry.n_pixels * geometry.n_views * geometry.n_det
