"""Training and sampling loops for the base denoiser and its control adapters."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .control import ControlState, ControlVariant, controlled_predict_noise
from .diffusion import LatentCodec, NoiseSchedule, ddim_sample, forward_diffuse, initial_noise, mse
from .errors import NumericalError
from .tensor import Tensor
from .unet import UNetModel

log = logging.getLogger(__name__)


@dataclass
class TrainData:
    """Arrays the loop draws minibatches from (targets already in model space)."""

    x0: np.ndarray        # [n, C, h, w]
    control: np.ndarray   # [n, 3, H, W]
    labels: np.ndarray    # [n]


def model_fn_for(base: UNetModel, variant: ControlVariant, state: ControlState | None):
    """``(x_t, t, args) -> eps`` closure; ``args`` is ``(labels, control)``."""
    def fn(x_t: Tensor, t: np.ndarray, args) -> Tensor:
        labels, control = args
        c = None if control is None else Tensor(control)
        return controlled_predict_noise(base, variant, state, x_t, t, labels, c)
    return fn


def trainable_store(base: UNetModel, variant: ControlVariant, state: ControlState | None) -> tn.ParamStore:
    """Mark the parameters a run may update and return them.

    The uncontrolled variant trains the whole base model; every control
    variant freezes the base model and trains only its own parameters.
    """
    if variant.tag == "none":
        base.params.set_trainable(True)
        return base.params
    base.params.set_trainable(False)
    state.params.set_trainable(True)
    return state.params


def train_denoiser(base: UNetModel, variant: ControlVariant, state: ControlState | None, data: TrainData,
                   sched: NoiseSchedule, steps: int, batch: int, lr: float, seed: int,
                   optimizer: str = "adam", on_step: Callable[[int, float], None] | None = None,
                   start_step: int = 0, rng: np.random.Generator | None = None) -> list[float]:
    """Minimise the noise-prediction MSE for ``steps`` minibatch updates; returns per-step losses.

    ``rng`` overrides the generator seeded from ``seed`` (callers that
    checkpoint mid-run pass their own so its state can be saved).
    """
    params = trainable_store(base, variant, state)
    opt = tn.Adam(params, lr=lr) if optimizer == "adam" else None
    fn = model_fn_for(base, variant, state)
    rng = rng if rng is not None else np.random.default_rng(seed)
    n = len(data.x0)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, n, size=batch)
        t = rng.integers(1, sched.T + 1, size=batch)
        eta = rng.standard_normal(data.x0[idx].shape, dtype=np.float32)
        xt = forward_diffuse(data.x0[idx], t, eta, sched)
        args = (data.labels[idx], None if variant.tag == "none" else data.control[idx])
        with tn.Tape() as tape:
            loss = mse(Tensor(eta), fn(xt, t, args))
        params.zero_grad()
        tn.backward(loss, tape)
        tape.clear()
        if opt is not None:
            opt.step()
        else:
            tn.optimizer_step(params, lr)
        value = float(loss.item())
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at step {start_step + step}")
        losses.append(value)
        if on_step is not None:
            on_step(start_step + step, value)
        if step % 100 == 0:
            log.debug("step %d loss %.5f", start_step + step, value)
    return losses


def sample_images(base: UNetModel, variant: ControlVariant, state: ControlState | None, sched: NoiseSchedule,
                  control: np.ndarray, labels: np.ndarray, ddim_steps: int, seed: int,
                  codec: LatentCodec | None = None, batch: int = 16) -> np.ndarray:
    """DDIM samples for each (control, label) pair, decoded and clamped to [-1, 1].

    Element ``i`` always draws its starting noise from stream ``seed + i``, so
    results do not depend on ``batch``.
    """
    fn = model_fn_for(base, variant, state)
    n = len(labels)
    H, W = control.shape[2:]
    if codec is not None and codec.mode != "pixel":
        H, W = H // 4, W // 4
    out = []
    for lo in range(0, n, batch):
        hi = min(n, lo + batch)
        shape = (hi - lo, base.cfg.in_channels, H, W)
        x_start = np.concatenate([initial_noise((1,) + shape[1:], seed + i) for i in range(lo, hi)])
        x = ddim_sample(fn, sched, ddim_steps, shape, seed, (labels[lo:hi], control[lo:hi]),
                        clip_denoised=True, x_start=x_start).data
        if codec is not None and codec.mode != "pixel":
            x = codec.inverse_transform(x)
        out.append(np.clip(x, -1.0, 1.0))
    return np.concatenate(out).astype(np.float32)
