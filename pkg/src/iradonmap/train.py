"""MSE objective, RMSProp and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .layers import IRadonMap

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient."""


@dataclass
class TrainingConfig:
    minibatch_size: int = 2
    learning_rate: float = 2e-5
    rho: float = 0.9
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    n_iterations: int = 500
    seed: int = 0
    checkpoint_interval: int = 100

    def __post_init__(self):
        checks = [
            ("minibatch_size", self.minibatch_size >= 1, ">= 1"),
            ("learning_rate", self.learning_rate >= 0, ">= 0"),
            ("rho", 0 < self.rho < 1, "in (0, 1)"),
            ("epsilon", self.epsilon > 0, "> 0"),
            ("weight_decay", self.weight_decay >= 0, ">= 0"),
            ("n_iterations", self.n_iterations >= 0, ">= 0"),
            ("checkpoint_interval", self.checkpoint_interval >= 0, ">= 0 (0 disables)"),
        ]
        for name, ok, accepted in checks:
            if not ok:
                raise ValueError(f"{name}={getattr(self, name)!r} invalid, accepted range {accepted}")


@dataclass
class OptimizerState:
    v: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, n: int, dtype=np.float32) -> "OptimizerState":
        return cls(np.zeros(n, dtype=dtype))


def mse_loss(outputs, refs):
    """``E = 1/N sum_i ||out_i - ref_i||^2`` (pixel sums) and ``dE/d out_i = 2/N (out_i - ref_i)``."""
    outputs = np.asarray(outputs)
    refs = np.asarray(refs)
    if outputs.shape != refs.shape or outputs.ndim < 1 or outputs.shape[0] < 1:
        raise ValueError(f"batch mismatch: outputs {outputs.shape}, refs {refs.shape}")
    n = outputs.shape[0]
    diff = outputs - refs
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    return loss, (2.0 / n) * diff


def rmsprop_step(theta: np.ndarray, grad: np.ndarray, state: OptimizerState, cfg: TrainingConfig):
    """One RMSProp update on flat vectors; returns ``(theta, state)`` (new objects).

    ``v <- rho v + (1 - rho) g^2``; ``theta <- theta - lr g / (sqrt(v) + eps)``,
    with ``g`` augmented by ``weight_decay * theta``.
    """
    if theta.shape != grad.shape or theta.shape != state.v.shape:
        raise ValueError(f"misaligned vectors: theta {theta.shape}, grad {grad.shape}, v {state.v.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NumericalError(f"non-finite gradient ({bad} entries) at iteration {state.iteration}")
    g = grad + cfg.weight_decay * theta if cfg.weight_decay else grad
    dtype = theta.dtype
    rho, one = dtype.type(cfg.rho), dtype.type(1)
    v = rho * state.v + (one - rho) * g * g
    theta = theta - dtype.type(cfg.learning_rate) * g / (np.sqrt(v) + dtype.type(cfg.epsilon))
    return theta, OptimizerState(v, state.iteration + 1)


def save_checkpoint(path, model: IRadonMap, state: OptimizerState, cfg: TrainingConfig) -> None:
    tensors = model.to_tensors()
    tensors["optim/v"] = state.v
    tensors["optim/iteration"] = np.array(state.iteration, dtype=np.int64)
    tensors["train/config"] = container.encode_json(asdict(cfg))
    container.save_archive(path, tensors)


def load_checkpoint(path):
    """Returns ``(model, state, cfg)``; state/cfg are ``None`` for bare model archives."""
    tensors = container.load_archive(path)
    model = IRadonMap.from_tensors(tensors)
    state = cfg = None
    if "optim/v" in tensors:
        state = OptimizerState(tensors["optim/v"], int(tensors["optim/iteration"]))
    if "train/config" in tensors:
        cfg = TrainingConfig(**container.decode_json(tensors["train/config"]))
    return model, state, cfg


def batch_stream(n_items: int, batch_size: int, rng: np.random.Generator):
    """Endless minibatches drawn from per-epoch permutations, wrapping across epochs."""
    pending = np.empty(0, dtype=np.int64)
    while True:
        while pending.size < batch_size:
            pending = np.concatenate([pending, rng.permutation(n_items)])
        yield pending[:batch_size]
        pending = pending[batch_size:]


def evaluate_mse(model: IRadonMap, sinos, images, batch_size: int = 8) -> float:
    """Mean per-pixel squared error of the model over a dataset."""
    total = 0.0
    for start in range(0, len(sinos), batch_size):
        out = model(sinos[start:start + batch_size])
        total += float(np.sum((out.astype(np.float64) - images[start:start + batch_size]) ** 2))
    return total / (len(sinos) * model.geometry.n_pixels)


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)  # (iteration, mse)
    checkpoints: list = field(default_factory=list)
    state: OptimizerState | None = None
    halted: str | None = None


def train(model: IRadonMap, sinos, images, cfg: TrainingConfig, out_dir=None,
          val=None, val_interval: int = 0, state: OptimizerState | None = None) -> TrainResult:
    """Minimize the MSE with RMSProp over ``cfg.n_iterations`` minibatch steps.

    ``sinos`` is ``(M, n_views, n_det)`` and ``images`` ``(M, n_y, n_x)``.
    With ``out_dir`` set, writes ``loss.csv`` (``iter,loss``) and
    ``ckpt_XXXXXX.irdm`` files (iteration 0, every ``checkpoint_interval``
    and the last). ``val=(sinos, images)`` enables validation MSE tracking
    every ``val_interval`` iterations (and at start/end). A non-finite loss
    stops training; the last good checkpoint stays on disk and
    ``result.halted`` explains why.
    """
    sinos = np.asarray(sinos, dtype=model.dtype)
    images = np.asarray(images, dtype=model.dtype)
    if len(sinos) == 0 or len(sinos) != len(images):
        raise ValueError(f"need a nonempty dataset with matching pairs, got {len(sinos)}/{len(images)}")
    if sinos.shape[1:] != model.geometry.sino_shape or images.shape[1:] != model.geometry.image_shape:
        raise ValueError("dataset tensors do not match the model geometry")

    rng = np.random.default_rng(cfg.seed)
    batches = batch_stream(len(sinos), cfg.minibatch_size, rng)
    theta = model.flatten()
    state = state or OptimizerState.zeros(theta.size, model.dtype)
    result = TrainResult(state=state)
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "loss.csv", "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(["iter", "loss"])

    def checkpoint(it):
        if out_dir is not None:
            path = out_dir / f"ckpt_{it:06d}.irdm"
            save_checkpoint(path, model, state, cfg)
            result.checkpoints.append(path)

    def validate(it):
        if val is not None:
            result.val_mse.append((it, evaluate_mse(model, *val)))

    try:
        checkpoint(state.iteration)
        validate(state.iteration)
        for _ in range(cfg.n_iterations):
            idx = next(batches)
            out, cache = model.forward(sinos[idx])
            loss, dout = mse_loss(out, images[idx])
            if not math.isfinite(loss):
                result.halted = f"non-finite loss at iteration {state.iteration + 1}"
                break
            grads, _ = model.backward(dout, cache)
            try:
                theta, state = rmsprop_step(theta, model.flatten(grads), state, cfg)
            except NumericalError as exc:
                result.halted = str(exc)
                break
            model.set_flat(theta)
            result.losses.append(loss)
            if writer is not None:
                writer.writerow([state.iteration, repr(loss)])
            it = state.iteration
            if val_interval and it % val_interval == 0 and it != cfg.n_iterations:
                validate(it)
            if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                checkpoint(it)
        if result.halted is None:
            if not result.checkpoints or result.checkpoints[-1].name != f"ckpt_{state.iteration:06d}.irdm":
                checkpoint(state.iteration)
            if not result.val_mse or result.val_mse[-1][0] != state.iteration:
                validate(state.iteration)
        else:
            log.error("training halted: %s", result.halted)
    finally:
        if writer is not None:
            log_file.close()
    result.state = state
    if out_dir is not None and val is not None:
        (out_dir / "val_mse.json").write_text(json.dumps(result.val_mse))
    return result
