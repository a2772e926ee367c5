"""Geometry control of the base denoiser through its skip connections.

Four variants share one dispatch, :func:`controlled_predict_noise`:

* ``none``          the base model unchanged.
* ``wca``           windowed cross-attention gate per level; queries from the
                    control skips, keys/values from the base skips.
* ``smartcontrol``  a small conv predictor on the concatenated skip pair.
* ``controlnet``    a trainable encoder clone whose features are added to the
                    base skips through zero-initialised 1x1 convolutions.

``wca`` and ``smartcontrol`` run the *frozen* base encoder on
``z_t + embed(c)`` to obtain control skips; the decoder receives
``s + alpha * s_ctr`` at every level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ShapeError
from .tensor import ParamStore, Tensor
from .unet import Layer, UNetConfig, UNetModel, conv_layer, encoder_layers, init_layer_params

VARIANTS = ("none", "controlnet", "smartcontrol", "wca")
GATE_BIAS = -5.0
EMBED_HIDDEN = 16


@dataclass(frozen=True)
class ControlVariant:
    tag: str = "wca"
    window_sizes: int | tuple[int, ...] = 4
    scale_attention: bool = True
    qkv_kernel: int = 1

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ConfigError(f"unknown control variant {self.tag!r}; expected one of {VARIANTS}")
        ws = self.window_sizes
        if not isinstance(ws, int):
            object.__setattr__(self, "window_sizes", tuple(int(w) for w in ws))
        if self.qkv_kernel not in (1, 3):
            raise ConfigError("qkv_kernel must be 1 or 3")

    def level_windows(self, levels: int) -> list[int]:
        ws = self.window_sizes
        if isinstance(ws, int):
            return [ws] * levels
        if len(ws) != levels:
            raise ConfigError(f"window size list has {len(ws)} entries, model has {levels} levels")
        return list(ws)

    @property
    def label(self) -> str:
        if self.tag != "wca":
            return self.tag
        ws = self.window_sizes
        return f"wca_ws={ws}" if isinstance(ws, int) else "wca_ws=[" + ",".join(map(str, ws)) + "]"


def check_variant(variant: ControlVariant, cfg: UNetConfig, h: int, w: int) -> None:
    """Raise if any level's resolution is incompatible with its window size."""
    if variant.tag != "wca":
        return
    problems = []
    for i, (ws, (_, lh, lw)) in enumerate(zip(variant.level_windows(cfg.levels), cfg.level_shapes(h, w))):
        if ws < 2:
            problems.append(f"level {i + 1}: window size {ws} < 2")
        elif lh % ws or lw % ws:
            problems.append(f"level {i + 1}: {lh}x{lw} not divisible by window size {ws}")
    if problems:
        raise ShapeError("; ".join(problems))


class ControlState:
    """Trainable control parameters plus the bookkeeping the dispatch needs."""

    def __init__(self, variant: ControlVariant, params: ParamStore, embed_strides: Sequence[int] = (1, 1)):
        self.variant = variant
        self.params = params
        self.embed_strides = tuple(embed_strides)
        self.force_alpha_zero = False


# -- descriptions -------------------------------------------------------------------

def embedder_layers(in_channels: int, h: int, w: int, strides=(1, 1), prefix: str = "embed") -> list[Layer]:
    h1, w1 = h // strides[0], w // strides[0]
    h2, w2 = h1 // strides[1], w1 // strides[1]
    n = EMBED_HIDDEN
    return [
        conv_layer(f"{prefix}.0", 3, n, 3, (h1, w1)),
        Layer("elementwise", f"{prefix}.act0", elements=n * h1 * w1),
        conv_layer(f"{prefix}.1", n, n, 3, (h2, w2)),
        Layer("elementwise", f"{prefix}.act1", elements=n * h2 * w2),
        conv_layer(f"{prefix}.2", n, in_channels, 3, (h2, w2)),
        Layer("elementwise", f"{prefix}.add", elements=in_channels * h2 * w2),
    ]


def _shared(layers: list[Layer]) -> list[Layer]:
    return [replace(L, name=f"shared:{L.name}") for L in layers]


def adapter_layers(variant: ControlVariant, cfg: UNetConfig, h: int, w: int, strides=(1, 1)) -> list[Layer]:
    """Extra layers a control variant adds on top of the base model (one sample).

    Layers whose name starts with ``shared:`` reuse frozen base weights: they
    cost FLOPs but own no parameters.
    """
    if variant.tag == "none":
        return []
    f = strides[0] * strides[1]
    layers = embedder_layers(cfg.in_channels, h * f, w * f, strides)
    shapes = cfg.level_shapes(h, w)
    if variant.tag == "controlnet":
        enc = [L for L in encoder_layers(cfg, h, w, prefix="clone.")]
        layers += enc
        for i, (c, lh, lw) in enumerate(shapes):
            layers.append(conv_layer(f"zc.{i}", c, c, 1, (lh, lw)))
            layers.append(Layer("elementwise", f"zc.{i}.add", elements=c * lh * lw))
        return layers
    layers += _shared(encoder_layers(cfg, h, w))
    for i, (c, lh, lw) in enumerate(shapes):
        n = lh * lw
        if variant.tag == "wca":
            ws = variant.level_windows(cfg.levels)[i]
            k = variant.qkv_kernel
            layers += [conv_layer(f"wca.{i}.{r}", c, c, k, (lh, lw), bias=False) for r in "qkv"]
            layers.append(Layer("attention", f"wca.{i}.attn", dims=(n // (ws * ws), ws * ws, c)))
            layers.append(conv_layer(f"wca.{i}.out", c, 1, 1, (lh, lw)))
        else:
            layers += [conv_layer(f"sc.{i}.conv1", 2 * c, c, 3, (lh, lw)),
                       Layer("elementwise", f"sc.{i}.act1", elements=c * n),
                       conv_layer(f"sc.{i}.conv2", c, c, 3, (lh, lw)),
                       Layer("elementwise", f"sc.{i}.act2", elements=c * n),
                       conv_layer(f"sc.{i}.out", c, 1, 1, (lh, lw))]
        layers.append(Layer("elementwise", f"gate.{i}.sigmoid", elements=n))
        layers.append(Layer("elementwise", f"gate.{i}.mix", elements=2 * c * n))
    return layers


def build_control(base: UNetModel, variant: ControlVariant, seed: int = 0, resolution: int = 32,
                  embed_strides: Sequence[int] = (1, 1)) -> ControlState:
    """Initialise a variant's trainable parameters.

    Gates start almost closed (``sigmoid(-5)``), the embedder's last layer and
    ControlNet's 1x1 convolutions start at zero, and the ControlNet clone
    copies the base encoder weights.
    """
    cfg = base.cfg
    check_variant(variant, cfg, resolution, resolution)
    if variant.tag == "none":
        return ControlState(variant, ParamStore(), embed_strides)
    rng = np.random.default_rng(seed)
    layers = [L for L in adapter_layers(variant, cfg, resolution, resolution, embed_strides)
              if not L.name.startswith("shared:")]
    zero = {"embed.2"} | {f"zc.{i}" for i in range(cfg.levels)}
    zero |= {f"wca.{i}.out" for i in range(cfg.levels)} | {f"sc.{i}.out" for i in range(cfg.levels)}
    arrays = init_layer_params(layers, rng, zero=tuple(zero))
    for i in range(cfg.levels):
        for name in (f"wca.{i}.out.b", f"sc.{i}.out.b"):
            if name in arrays:
                arrays[name] = np.full(1, GATE_BIAS, np.float32)
    if variant.tag == "controlnet":
        for name, p in base.params.items():
            if name.startswith(("stem.", "enc.")):
                arrays[f"clone.{name}"] = p.data.copy()
    return ControlState(variant, ParamStore(arrays), embed_strides)


# -- operations ------------------------------------------------------------------------

def embed_control(c: Tensor, state: ControlState, out_shape: Sequence[int] | None = None) -> Tensor:
    """Map a control raster to the denoiser's input shape."""
    p = state.params
    if c.ndim != 4 or c.shape[1] != 3:
        raise ShapeError(f"control raster must be [B, 3, H, W], got {c.shape}")
    s0, s1 = state.embed_strides
    h = tn.silu(tn.conv2d(c, p["embed.0.w"], p["embed.0.b"], stride=s0, padding=1))
    h = tn.silu(tn.conv2d(h, p["embed.1.w"], p["embed.1.b"], stride=s1, padding=1))
    out = tn.conv2d(h, p["embed.2.w"], p["embed.2.b"], padding=1)
    if out_shape is not None and out.shape != tuple(out_shape):
        raise ShapeError(f"control raster {c.shape} embeds to {out.shape}, expected {tuple(out_shape)}")
    return out


def control_skips(base: UNetModel, variant: ControlVariant, state: ControlState, c: Tensor,
                  z_t: Tensor, emb: Tensor) -> list[Tensor]:
    """Control-branch skips: frozen base encoder (wca/smartcontrol) or trainable clone (controlnet)."""
    if variant.tag == "none":
        raise ValueError("control_skips needs a control variant other than 'none'")
    x = tn.add(z_t, embed_control(c, state, z_t.shape))
    if variant.tag == "controlnet":
        _, skips = base.encode(x, emb, params=state.params, prefix="clone.")
    else:
        _, skips = base.encode(x, emb)
    return skips


def _window_conv(t: Tensor, w: Tensor, ws: int) -> Tensor:
    """Partition into windows, then convolve each window on its own (zero padding at window edges).

    Returns tokens ``[B * n_windows, ws*ws, C]``. Convolving inside windows
    keeps every window independent even for 3x3 kernels.
    """
    tok = tn.window_partition(t, ws)
    n, T, C = tok.shape
    img = tn.reshape(tn.transpose(tok, (0, 2, 1)), (n, C, ws, ws))
    out = tn.conv2d(img, w, padding=w.shape[-1] // 2)
    return tn.transpose(tn.reshape(out, (n, out.shape[1], T)), (0, 2, 1))


def windowed_cross_attention(s: Tensor, s_ctr: Tensor, params: ParamStore, level: int, ws: int,
                             scale: bool = True) -> Tensor:
    """Per-window attention output ``O`` (same shape as ``s``); queries come from ``s_ctr``."""
    if s.shape != s_ctr.shape:
        raise ShapeError(f"skip shapes differ: {s.shape} vs {s_ctr.shape}")
    pre = f"wca.{level}"
    Q = _window_conv(s_ctr, params[f"{pre}.q.w"], ws)
    K = _window_conv(s, params[f"{pre}.k.w"], ws)
    V = _window_conv(s, params[f"{pre}.v.w"], ws)
    logits = tn.batched_matmul(Q, tn.transpose(K, (0, 2, 1)))
    if scale:
        logits = tn.mul(logits, 1.0 / math.sqrt(s.shape[1]))
    A = tn.softmax(logits, axis=-1)
    return tn.window_merge(tn.batched_matmul(A, V), ws, s.shape)


def wca_alpha(s: Tensor, s_ctr: Tensor, params: ParamStore, level: int, ws: int, scale: bool = True) -> Tensor:
    """Single-channel mixing map in (0, 1) for one level."""
    O = windowed_cross_attention(s, s_ctr, params, level, ws, scale)
    return tn.sigmoid(tn.conv2d(O, params[f"wca.{level}.out.w"], params[f"wca.{level}.out.b"]))


def smartcontrol_alpha(s: Tensor, s_ctr: Tensor, params: ParamStore, level: int) -> Tensor:
    if s.shape != s_ctr.shape:
        raise ShapeError(f"skip shapes differ: {s.shape} vs {s_ctr.shape}")
    pre = f"sc.{level}"
    h = tn.silu(tn.conv2d(tn.concat_channels(s, s_ctr), params[f"{pre}.conv1.w"], params[f"{pre}.conv1.b"], padding=1))
    h = tn.silu(tn.conv2d(h, params[f"{pre}.conv2.w"], params[f"{pre}.conv2.b"], padding=1))
    return tn.sigmoid(tn.conv2d(h, params[f"{pre}.out.w"], params[f"{pre}.out.b"]))


def mix_skip(s: Tensor, s_ctr: Tensor, alpha: Tensor) -> Tensor:
    """``s + alpha * s_ctr`` with ``alpha`` broadcast over channels."""
    if s.shape != s_ctr.shape:
        raise ShapeError(f"skip shapes differ: {s.shape} vs {s_ctr.shape}")
    B, _, H, W = s.shape
    if alpha.shape != (B, 1, H, W):
        raise ShapeError(f"mixing map must be {(B, 1, H, W)}, got {alpha.shape}")
    return tn.add(s, tn.mul(alpha, s_ctr))


def controlnet_residuals(state: ControlState, clone_skips: Sequence[Tensor]) -> list[Tensor]:
    p = state.params
    return [tn.conv2d(f, p[f"zc.{i}.w"], p[f"zc.{i}.b"]) for i, f in enumerate(clone_skips)]


def compute_alphas(base: UNetModel, state: ControlState, skips, ctrl) -> list[Tensor]:
    v = state.variant
    if state.force_alpha_zero:
        return [Tensor(np.zeros((s.shape[0], 1) + s.shape[2:], dtype=s.data.dtype)) for s in skips]
    if v.tag == "wca":
        wss = v.level_windows(base.cfg.levels)
        return [wca_alpha(s, sc, state.params, i, ws, v.scale_attention)
                for i, (s, sc, ws) in enumerate(zip(skips, ctrl, wss))]
    return [smartcontrol_alpha(s, sc, state.params, i) for i, (s, sc) in enumerate(zip(skips, ctrl))]


def controlled_predict_noise(base: UNetModel, variant: ControlVariant, state: ControlState | None,
                             z_t: Tensor, t, label, c: Tensor | None) -> Tensor:
    """Noise estimate of the base denoiser under the given control variant."""
    emb = base.embed(t, label)
    if variant.tag == "none":
        bottleneck, skips = base.encode(z_t, emb)
        return base.decode(bottleneck, skips, emb)
    check_variant(variant, base.cfg, *z_t.shape[2:])
    bottleneck, skips = base.encode(z_t, emb)
    ctrl = control_skips(base, variant, state, c, z_t, emb)
    if variant.tag == "controlnet":
        mixed = [tn.add(s, r) for s, r in zip(skips, controlnet_residuals(state, ctrl))]
    else:
        alphas = compute_alphas(base, state, skips, ctrl)
        mixed = [mix_skip(s, sc, a) for s, sc, a in zip(skips, ctrl, alphas)]
    return base.decode(bottleneck, mixed, emb)


def mixing_maps(base: UNetModel, state: ControlState, z_t: Tensor, t, label, c: Tensor) -> list[np.ndarray]:
    """The per-level alpha maps a gated variant would apply (inspection helper)."""
    with tn.no_grad():
        emb = base.embed(t, label)
        _, skips = base.encode(z_t, emb)
        ctrl = control_skips(base, state.variant, state, c, z_t, emb)
        return [a.data for a in compute_alphas(base, state, skips, ctrl)]
