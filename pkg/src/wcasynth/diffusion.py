"""Noise schedules, forward corruption, the denoising objective and samplers."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import tensor as tn
from .errors import ShapeError
from .tensor import Tensor

ModelFn = Callable[[Tensor, np.ndarray, Any], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Variances ``betas[t-1]`` and cumulative products ``alpha_bars[t-1]`` for t = 1..T."""

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t) -> np.ndarray:
        """``alpha_bar`` at integer step(s) ``t`` with the convention alpha_bar(0) = 1."""
        t = np.asarray(t, dtype=np.int64)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def schedule_from_betas(betas: Sequence[float]) -> NoiseSchedule:
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or b.size < 1:
        raise ValueError("betas must be a non-empty 1-D sequence")
    if np.any(b <= 0) or np.any(b >= 1):
        raise ValueError("every beta must lie strictly inside (0, 1)")
    return NoiseSchedule(T=int(b.size), betas=b, alpha_bars=np.cumprod(1.0 - b))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _per_sample(coef: np.ndarray, ndim: int, batch: int) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    if coef.shape != (batch,):
        raise ShapeError(f"per-sample timesteps must have length {batch}, got {coef.shape}")
    return coef.reshape((batch,) + (1,) * (ndim - 1))


def _check_t(t, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"timestep out of range [1, {sched.T}]: {t}")
    return t


def forward_diffuse(x0, t, eta, sched: NoiseSchedule | None = None, alpha_bar: float | None = None) -> Tensor:
    """``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eta``.

    ``t`` may be an int or one step per batch element. ``alpha_bar`` overrides
    the schedule lookup (used to probe the degenerate limits).
    """
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float32)
    ed = eta.data if isinstance(eta, Tensor) else np.asarray(eta, dtype=np.float32)
    if x0d.shape != ed.shape:
        raise ShapeError(f"eta shape {ed.shape} differs from x0 shape {x0d.shape}")
    if alpha_bar is None:
        if sched is None:
            raise ValueError("need a schedule or an explicit alpha_bar")
        ab = sched.alpha_bar(_check_t(t, sched))
    else:
        ab = np.asarray(alpha_bar, dtype=np.float64)
    ab = _per_sample(ab, x0d.ndim, x0d.shape[0])
    xt = np.sqrt(ab) * x0d + np.sqrt(1.0 - ab) * ed
    return Tensor(xt.astype(x0d.dtype))


def mse(target, pred: Tensor) -> Tensor:
    td = target.data if isinstance(target, Tensor) else target
    if td.shape != pred.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from target shape {td.shape}")
    return tn.mean(tn.square(tn.sub(target, pred)))


def training_loss(model_fn: ModelFn, x0, t, eta, args, sched: NoiseSchedule) -> Tensor:
    """Mean squared error between the injected noise and the model's estimate."""
    xt = forward_diffuse(x0, t, eta, sched)
    pred = model_fn(xt, np.atleast_1d(np.asarray(t, dtype=np.int64)), args)
    eta_t = eta if isinstance(eta, Tensor) else Tensor(eta)
    return mse(eta_t, pred)


def initial_noise(shape: Sequence[int], seed: int) -> np.ndarray:
    """Standard normal start point; element ``b`` draws from stream ``seed + b``."""
    return np.stack([np.random.default_rng(seed + b).standard_normal(tuple(shape[1:]), dtype=np.float32)
                     for b in range(shape[0])])


def ddim_timesteps(T: int, steps: int) -> list[tuple[int, int]]:
    """Descending (t, t_prev) pairs with stride ``T // steps``, ending at t_prev = 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    stride = T // steps
    ts = [T - k * stride for k in range(steps)]
    return list(zip(ts, ts[1:] + [0]))


def ddim_sample(model_fn: ModelFn, sched: NoiseSchedule, steps: int, shape: Sequence[int], seed: int,
                args=None, eta_coeff: float = 0.0, clip_denoised: bool = False,
                x_start: np.ndarray | None = None) -> Tensor:
    """Deterministic DDIM sampling over an evenly strided timestep subsequence."""
    if eta_coeff != 0:
        raise NotImplementedError("only deterministic DDIM (eta_coeff = 0) is supported")
    x = initial_noise(shape, seed) if x_start is None else np.asarray(x_start, dtype=np.float32)
    B = x.shape[0]
    with tn.no_grad():
        for t, t_prev in ddim_timesteps(sched.T, steps):
            eps = model_fn(Tensor(x), np.full(B, t, dtype=np.int64), args).data
            ab, ab_prev = float(sched.alpha_bar(t)), float(sched.alpha_bar(t_prev))
            x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
            if clip_denoised:
                x0_hat = np.clip(x0_hat, -1.0, 1.0)
            x = (math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps).astype(np.float32)
    return Tensor(x)


def ddpm_sample(model_fn: ModelFn, sched: NoiseSchedule, seed: int, args=None,
                shape: Sequence[int] = (1, 3, 32, 32), clip_denoised: bool = False) -> Tensor:
    """Ancestral sampling with per-step noise of variance beta_t (none at the last step)."""
    rngs = [np.random.default_rng(seed + b) for b in range(shape[0])]
    x = np.stack([r.standard_normal(tuple(shape[1:]), dtype=np.float32) for r in rngs])
    B = shape[0]
    with tn.no_grad():
        for t in range(sched.T, 0, -1):
            eps = model_fn(Tensor(x), np.full(B, t, dtype=np.int64), args).data
            ab, ab_prev = float(sched.alpha_bar(t)), float(sched.alpha_bar(t - 1))
            beta = float(sched.betas[t - 1])
            x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
            if clip_denoised:
                x0_hat = np.clip(x0_hat, -1.0, 1.0)
            c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
            ct = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
            mean = c0 * x0_hat + ct * x
            if t > 1:
                z = np.stack([r.standard_normal(tuple(shape[1:]), dtype=np.float32) for r in rngs])
                mean = mean + math.sqrt(beta) * z
            x = mean.astype(np.float32)
    return Tensor(x)


# -- latent codec ----------------------------------------------------------------

class LatentCodec(TransformerMixin, BaseEstimator):
    """Small strided-conv autoencoder with a 4x spatial reduction.

    With ``mode="pixel"`` the codec is the identity map and fitting is a no-op.
    ``transform`` encodes images, ``inverse_transform`` decodes latents.
    """

    def __init__(self, mode: str = "latent", latent_channels: int = 4, hidden: int = 16,
                 in_channels: int = 3, lr: float = 2e-3, batch_size: int = 16, seed: int = 0):
        self.mode = mode
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.in_channels = in_channels
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _init_params(self) -> tn.ParamStore:
        rng = np.random.default_rng(self.seed)
        c, h, z = self.in_channels, self.hidden, self.latent_channels

        def conv(o, i, k):
            bound = 1.0 / math.sqrt(i * k * k)
            return rng.uniform(-bound, bound, (o, i, k, k))

        return tn.ParamStore({
            "enc.0.w": conv(h, c, 3), "enc.0.b": np.zeros(h),
            "enc.1.w": conv(z, h, 3), "enc.1.b": np.zeros(z),
            "dec.0.w": conv(h, z, 3), "dec.0.b": np.zeros(h),
            "dec.1.w": conv(c, h, 3), "dec.1.b": np.zeros(c),
        })

    @property
    def params_(self) -> tn.ParamStore:
        if not hasattr(self, "_params"):
            self._params = self._init_params()
        return self._params

    def encode(self, x: Tensor) -> Tensor:
        if self.mode == "pixel":
            return x
        p = self.params_
        h = tn.silu(tn.conv2d(x, p["enc.0.w"], p["enc.0.b"], stride=2, padding=1))
        return tn.conv2d(h, p["enc.1.w"], p["enc.1.b"], stride=2, padding=1)

    def decode(self, z: Tensor) -> Tensor:
        if self.mode == "pixel":
            return z
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(f"latent must be [B, {self.latent_channels}, h, w], got {z.shape}")
        p = self.params_
        h = tn.silu(tn.conv2d(tn.upsample_nearest2x(z), p["dec.0.w"], p["dec.0.b"], padding=1))
        return tn.conv2d(tn.upsample_nearest2x(h), p["dec.1.w"], p["dec.1.b"], padding=1)

    def reconstruction_mse(self, images: np.ndarray) -> float:
        with tn.no_grad():
            x = Tensor(images)
            return float(tn.mean(tn.square(tn.sub(self.decode(self.encode(x)), x))).item())

    def fit(self, X, y=None, steps: int = 200):
        X = np.asarray(X, dtype=np.float32)
        self.history_: list[float] = []
        if self.mode == "pixel":
            return self
        params = self.params_
        opt = tn.Adam(params, lr=self.lr)
        rng = np.random.default_rng(self.seed)
        for _ in range(steps):
            idx = rng.choice(len(X), size=min(self.batch_size, len(X)), replace=False)
            x = Tensor(X[idx])
            with tn.Tape() as tape:
                loss = tn.mean(tn.square(tn.sub(self.decode(self.encode(x)), x)))
            opt.zero_grad()
            tn.backward(loss, tape)
            tape.clear()
            opt.step()
            self.history_.append(float(loss.item()))
        return self

    def transform(self, X):
        with tn.no_grad():
            return self.encode(Tensor(np.asarray(X, dtype=np.float32))).data

    def inverse_transform(self, Z):
        with tn.no_grad():
            return self.decode(Tensor(np.asarray(Z, dtype=np.float32))).data


def codec_train(codec: LatentCodec, dataset: np.ndarray, epochs: int = 200) -> list[float]:
    """Fit ``codec`` for ``epochs`` minibatch steps; returns the reconstruction-MSE history."""
    codec.fit(dataset, steps=epochs)
    return list(codec.history_)


def codec_encode(codec: LatentCodec, x: Tensor) -> Tensor:
    return codec.encode(x)


def codec_decode(codec: LatentCodec, z: Tensor) -> Tensor:
    return codec.decode(z)
