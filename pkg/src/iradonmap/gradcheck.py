"""Central finite-difference checks of every backward pass.

Each check draws a random small instance, reduces the layer output to a
scalar ``L = <out, G>`` with a random ``G``, and compares the analytic
gradients of every input and parameter with central differences. The
reported error is ``max_k ||a_k - n_k|| / max(||a_k||, ||n_k||)`` over the
checked tensors ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ImagingGeometry, build_bp_table
from .layers import (IRadonMap, conv2d_bwd, conv2d_fwd, filter_layer_bwd, filter_layer_fwd,
                     refiner_bwd, refiner_fwd, refiner_names, resblock_bwd, resblock_fwd,
                     sinobp_bwd, sinobp_fwd)

STEP = 1e-5
LAYER_TOL = 1e-6
MODEL_TOL = 1e-5
LAYERS = ("filter", "sinobp", "conv2d", "resblock", "refiner", "iradonmap")


def rel_error(a, n) -> float:
    a, n = np.ravel(a), np.ravel(n)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def numerical_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f()
        flat[i] = orig - h
        minus = f()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def _compare(f, pairs) -> float:
    return max(rel_error(analytic, numerical_grad(f, x)) for x, analytic in pairs)


def check_filter(rng, corrupt=False) -> float:
    p = rng.standard_normal((2, 3, 5))
    W = rng.standard_normal((5, 5))
    b = rng.standard_normal(5)
    G = rng.standard_normal((2, 3, 5))
    f = lambda: float(np.sum(filter_layer_fwd(p, W, b)[0] * G))
    dp, dW, db = filter_layer_bwd(G, filter_layer_fwd(p, W, b)[1])
    if corrupt:
        dW = dW * 1.01
    return _compare(f, [(p, dp), (W, dW), (b, db)])


def check_sinobp(rng, corrupt=False, granularity="pixel_view") -> float:
    g = ImagingGeometry(4, 5, 4, 7, angles=np.sort(rng.uniform(0, np.pi, 4)))
    table = build_bp_table(g)
    q = rng.standard_normal((2, 4, 7))
    shape = {"pixel_view": (4, 20), "view": (4, 1), "global": (1, 1)}[granularity]
    w = rng.standard_normal(shape)
    G = rng.standard_normal((2, 20))
    f = lambda: float(np.sum(sinobp_fwd(q, table, w)[0] * G))
    dq, dw = sinobp_bwd(G, sinobp_fwd(q, table, w)[1])
    if corrupt:
        dq = dq * 1.01
    return _compare(f, [(q, dq), (w, dw)])


def check_conv2d(rng, corrupt=False) -> float:
    x = rng.standard_normal((2, 2, 5, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    G = rng.standard_normal((2, 3, 5, 4))
    f = lambda: float(np.sum(conv2d_fwd(x, k, b)[0] * G))
    dx, dk, db = conv2d_bwd(G, conv2d_fwd(x, k, b)[1])
    if corrupt:
        dk = dk * 1.01
    return _compare(f, [(x, dx), (k, dk), (b, db)])


KINK_MARGIN = 1e-3


def _relu_inputs(refiner_cache):
    _, c_relu, block_caches, _ = refiner_cache
    yield c_relu
    for c0, _, c2, _ in block_caches:
        yield c0
        yield c2


def _clear_of_kinks(refiner_cache) -> bool:
    """True if no ReLU input lies within the margin of its kink.

    Exact zeros are ignored: they are outputs of an earlier ReLU and stay
    zero under small perturbations.
    """
    for z in _relu_inputs(refiner_cache):
        z = np.abs(z[z != 0])
        if z.size and z.min() < KINK_MARGIN:
            return False
    return True


def check_resblock(rng, corrupt=False) -> float:
    while True:
        x = rng.standard_normal((2, 2, 4, 5))
        k1, k2 = rng.standard_normal((2, 2, 2, 3, 3)) * 0.5
        b1, b2 = rng.standard_normal((2, 2))
        cache = resblock_fwd(x, k1, b1, k2, b2)[1]
        if _clear_of_kinks((None, cache[0], [cache], None)):
            break
    G = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(resblock_fwd(x, k1, b1, k2, b2)[0] * G))
    dx, dk1, db1, dk2, db2 = resblock_bwd(G, cache)
    if corrupt:
        db2 = db2 * 1.01
    return _compare(f, [(x, dx), (k1, dk1), (b1, db1), (k2, dk2), (b2, db2)])


def _random_refiner(rng, channels, blocks):
    params = {}
    for name in refiner_names(blocks):
        c_in = 1 if name.startswith("stem") else channels
        c_out = 1 if name.startswith("head") else channels
        if name.endswith("weight"):
            params[name] = rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(1.0 / (c_in * 9))
        else:
            params[name] = rng.standard_normal(c_out) * 0.1
    return params


def check_refiner(rng, corrupt=False) -> float:
    while True:
        params = _random_refiner(rng, 3, 2)
        x = rng.standard_normal((2, 1, 5, 5))
        out, cache = refiner_fwd(x, params)
        if _clear_of_kinks(cache):
            break
    G = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(refiner_fwd(x, params)[0] * G))
    dx, grads = refiner_bwd(G, cache)
    if corrupt:
        grads["stem.weight"] = grads["stem.weight"] * 1.01
    return _compare(f, [(x, dx)] + [(params[k], grads[k]) for k in params])


def check_iradonmap(rng, corrupt=False) -> float:
    """Whole model on an 8x8 image with 10 views, every parameter moved off its init."""
    g = ImagingGeometry.desk(8, 10)
    while True:
        model = IRadonMap(g, channels=2, blocks=1, dtype=np.float64, seed=int(rng.integers(1 << 31)))
        for k, v in model.params.items():
            v += rng.standard_normal(v.shape) * (0.1 if k.startswith("refiner") else 0.01)
        sino = rng.standard_normal((2,) + g.sino_shape)
        out, cache = model.forward(sino)
        if _clear_of_kinks(cache[3]):
            break
    G = rng.standard_normal((2,) + g.image_shape)
    f = lambda: float(np.sum(model(sino) * G))
    grads, dsino = model.backward(G, cache)
    if corrupt:
        grads["sinobp.w"] = grads["sinobp.w"] * 1.01
    return _compare(f, [(sino, dsino)] + [(model.params[k], grads[k]) for k in model.params])


CHECKS = {
    "filter": check_filter,
    "sinobp": check_sinobp,
    "conv2d": check_conv2d,
    "resblock": check_resblock,
    "refiner": check_refiner,
    "iradonmap": check_iradonmap,
}


@dataclass
class GradcheckResult:
    layer: str
    instances: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def run_suite(instances: int = 20, seed: int = 0, corrupt: str | None = None, layers=LAYERS):
    """Run every check on ``instances`` random draws; ``corrupt`` names a layer whose
    analytic gradient is deliberately scaled by 1.01 (negative control)."""
    if corrupt is not None and corrupt not in CHECKS:
        raise ValueError(f"unknown layer {corrupt!r}; choose from {LAYERS}")
    results = []
    for name in layers:
        rng = np.random.default_rng([seed, LAYERS.index(name)])
        worst = max(CHECKS[name](rng, corrupt=(name == corrupt)) for _ in range(instances))
        tol = MODEL_TOL if name == "iradonmap" else LAYER_TOL
        results.append(GradcheckResult(name, instances, worst, tol))
    return results
