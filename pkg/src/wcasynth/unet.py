"""Compact encoder/bottleneck/decoder denoiser exposing its skip features."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ShapeError
from .tensor import ParamStore, Tensor


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 128
    cond_embed_dim: int = 128
    num_scene_labels: int = 8
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if len(self.channel_mults) < 2:
            raise ConfigError("channel_mults needs at least two encoder levels")
        if self.base_channels % self.groups:
            raise ConfigError(f"base_channels ({self.base_channels}) not divisible by groups ({self.groups})")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if min(self.channel_mults) < 1 or self.in_channels < 1 or self.num_scene_labels < 1:
            raise ConfigError("channel counts and label count must be positive")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def check_resolution(self, h: int, w: int) -> None:
        f = 2 ** (self.levels - 1)
        if h % f or w % f:
            raise ShapeError(f"resolution {h}x{w} not divisible by 2^(N-1) = {f}")

    def level_shapes(self, h: int, w: int) -> list[tuple[int, int, int]]:
        """(channels, height, width) of every skip feature, finest first."""
        self.check_resolution(h, w)
        return [(c, h >> i, w >> i) for i, c in enumerate(self.channels)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t f_k), cos(t f_k)]`` with f_k geometric from 1 down to 1e-4.

    Returns ``[dim]`` for scalar ``t`` or ``[B, dim]`` for a vector of steps.
    """
    if dim % 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    half = dim // 2
    freqs = np.power(1e4, -np.arange(half) / max(half - 1, 1))
    t_arr = np.asarray(t, dtype=np.float64)
    ang = t_arr[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)


# -- layer description ------------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    """One entry of an analytic model description (per single sample)."""

    kind: str
    name: str
    cin: int = 0
    cout: int = 0
    k: int = 0
    out_hw: tuple[int, int] = (0, 0)
    bias: bool = True
    elements: int = 0
    dims: tuple[int, ...] = field(default_factory=tuple)


def conv_layer(name, cin, cout, k, out_hw, bias=True) -> Layer:
    return Layer("conv2d", name, cin=cin, cout=cout, k=k, out_hw=tuple(out_hw), bias=bias)


def _block_layers(prefix: str, cin: int, cout: int, hw: tuple[int, int], emb: int) -> list[Layer]:
    n = cout * hw[0] * hw[1]
    layers = [
        conv_layer(f"{prefix}.conv1", cin, cout, 3, hw),
        Layer("norm", f"{prefix}.norm1", cout=cout, elements=n),
        Layer("elementwise", f"{prefix}.act1", elements=n),
        Layer("linear", f"{prefix}.shift", cin=emb, cout=cout),
        Layer("elementwise", f"{prefix}.inject", elements=n),
        conv_layer(f"{prefix}.conv2", cout, cout, 3, hw),
        Layer("norm", f"{prefix}.norm2", cout=cout, elements=n),
        Layer("elementwise", f"{prefix}.act2", elements=n),
    ]
    if cin != cout:
        layers.append(conv_layer(f"{prefix}.res", cin, cout, 1, hw))
    layers.append(Layer("elementwise", f"{prefix}.residual", elements=n))
    return layers


def embedding_layers(cfg: UNetConfig, prefix: str = "") -> list[Layer]:
    return [
        Layer("linear", f"{prefix}time", cin=cfg.time_embed_dim, cout=cfg.cond_embed_dim),
        Layer("embedding", f"{prefix}label", dims=(cfg.num_scene_labels, cfg.cond_embed_dim)),
        Layer("elementwise", f"{prefix}emb_act", elements=2 * cfg.cond_embed_dim),
    ]


def encoder_layers(cfg: UNetConfig, h: int, w: int, prefix: str = "") -> list[Layer]:
    ch = cfg.channels
    layers = [conv_layer(f"{prefix}stem", cfg.in_channels, ch[0], 3, (h, w))]
    cin = ch[0]
    for i, c in enumerate(ch):
        hw = (h >> i, w >> i)
        layers += _block_layers(f"{prefix}enc.{i}", cin, c, hw, cfg.cond_embed_dim)
        if i < cfg.levels - 1:
            layers.append(conv_layer(f"{prefix}enc.{i}.down", c, c, 3, (hw[0] // 2, hw[1] // 2)))
        cin = c
    return layers


def decoder_layers(cfg: UNetConfig, h: int, w: int) -> list[Layer]:
    ch = cfg.channels
    N = cfg.levels
    cN = ch[-1]
    low = (h >> (N - 1), w >> (N - 1))
    layers = _block_layers("mid", cN, cN, low, cfg.cond_embed_dim)
    d = cN
    for j in range(N):
        lvl = N - 1 - j
        hw = (h >> lvl, w >> lvl)
        c = ch[lvl]
        layers += _block_layers(f"dec.{j}", d + c, c, hw, cfg.cond_embed_dim)
        if j < N - 1:
            up_hw = (hw[0] * 2, hw[1] * 2)
            layers.append(Layer("upsample", f"dec.{j}.upsample", elements=c * up_hw[0] * up_hw[1]))
            layers.append(conv_layer(f"dec.{j}.up", c, ch[lvl - 1], 3, up_hw))
            d = ch[lvl - 1]
        else:
            d = c
    n = ch[0] * h * w
    layers += [
        Layer("norm", "head.norm", cout=ch[0], elements=n),
        Layer("elementwise", "head.act", elements=n),
        conv_layer("head.conv", ch[0], cfg.in_channels, 3, (h, w)),
    ]
    return layers


def unet_layers(cfg: UNetConfig, h: int, w: int) -> list[Layer]:
    """Analytic description of the base denoiser for a single ``h x w`` sample."""
    return embedding_layers(cfg) + encoder_layers(cfg, h, w) + decoder_layers(cfg, h, w)


# -- parameters ------------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def init_layer_params(layers: Sequence[Layer], rng: np.random.Generator, zero: Sequence[str] = ()) -> dict:
    """Fan-in scaled uniform init for conv/linear layers, unit gains for norms."""
    out: dict[str, np.ndarray] = {}
    for L in layers:
        if L.kind == "conv2d":
            shape = (L.cout, L.cin, L.k, L.k)
            out[f"{L.name}.w"] = (np.zeros(shape, np.float32) if L.name in zero
                                  else _uniform(rng, shape, L.cin * L.k * L.k))
            if L.bias:
                out[f"{L.name}.b"] = np.zeros(L.cout, np.float32)
        elif L.kind == "linear":
            out[f"{L.name}.w"] = _uniform(rng, (L.cout, L.cin), L.cin)
            out[f"{L.name}.b"] = np.zeros(L.cout, np.float32)
        elif L.kind == "embedding":
            out[f"{L.name}.table"] = rng.standard_normal(L.dims).astype(np.float32)
        elif L.kind == "norm":
            out[f"{L.name}.g"] = np.ones(L.cout, np.float32)
            out[f"{L.name}.b"] = np.zeros(L.cout, np.float32)
    return out


class UNetModel:
    """Base denoiser: parameters plus the forward pieces used by the control schemes."""

    def __init__(self, cfg: UNetConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params

    # -- embeddings --
    def embed(self, t, labels) -> Tensor:
        p = self.params
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if labels.min() < 0 or labels.max() >= self.cfg.num_scene_labels:
            raise ValueError(f"scene label out of range [0, {self.cfg.num_scene_labels})")
        if t.shape != labels.shape:
            t = np.broadcast_to(t, labels.shape)
        temb = Tensor(time_embedding(t, self.cfg.time_embed_dim))
        e = tn.add(tn.linear(temb, p["time.w"], p["time.b"]), tn.embedding(p["label.table"], labels))
        return tn.silu(e)

    # -- blocks --
    def block(self, x: Tensor, emb: Tensor, prefix: str, params: ParamStore | None = None) -> Tensor:
        p = self.params if params is None else params
        g = self.cfg.groups
        h = tn.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], padding=1)
        h = tn.silu(tn.group_norm(h, g, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"]))
        h = tn.channel_shift(h, tn.linear(emb, p[f"{prefix}.shift.w"], p[f"{prefix}.shift.b"]))
        h = tn.conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], padding=1)
        h = tn.silu(tn.group_norm(h, g, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"]))
        if f"{prefix}.res.w" in p:
            x = tn.conv2d(x, p[f"{prefix}.res.w"], p[f"{prefix}.res.b"])
        return tn.add(h, x)

    def encode(self, z: Tensor, emb: Tensor, params: ParamStore | None = None,
               prefix: str = "") -> tuple[Tensor, list[Tensor]]:
        """Run the encoder; returns (bottleneck, skips) with skips finest first.

        ``params``/``prefix`` select an alternative encoder weight set with the
        same layout (used by the trainable clone of the control branch).
        """
        p = self.params if params is None else params
        if z.ndim != 4 or z.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected input [B, {self.cfg.in_channels}, H, W], got {z.shape}")
        self.cfg.check_resolution(*z.shape[2:])
        h = tn.conv2d(z, p[f"{prefix}stem.w"], p[f"{prefix}stem.b"], padding=1)
        skips = []
        for i in range(self.cfg.levels):
            h = self.block(h, emb, f"{prefix}enc.{i}", p)
            skips.append(h)
            if i < self.cfg.levels - 1:
                h = tn.conv2d(h, p[f"{prefix}enc.{i}.down.w"], p[f"{prefix}enc.{i}.down.b"], stride=2, padding=1)
        return h, skips

    def decode(self, bottleneck: Tensor, skips: Sequence[Tensor], emb: Tensor) -> Tensor:
        """Decoder; block ``j`` concatenates ``skips[N-1-j]`` onto its input."""
        p = self.params
        N = self.cfg.levels
        if len(skips) != N:
            raise ShapeError(f"expected {N} skip tensors, got {len(skips)}")
        B, _, H, W = bottleneck.shape
        H0, W0 = H << (N - 1), W << (N - 1)
        for (c, h, w), s in zip(self.cfg.level_shapes(H0, W0), skips):
            if s.shape != (B, c, h, w):
                raise ShapeError(f"skip shape {s.shape} does not match encoder level {(B, c, h, w)}")
        d = self.block(bottleneck, emb, "mid")
        for j in range(N):
            d = self.block(tn.concat_channels(d, skips[N - 1 - j]), emb, f"dec.{j}")
            if j < N - 1:
                d = tn.conv2d(tn.upsample_nearest2x(d), p[f"dec.{j}.up.w"], p[f"dec.{j}.up.b"], padding=1)
        d = tn.silu(tn.group_norm(d, self.cfg.groups, p["head.norm.g"], p["head.norm.b"]))
        return tn.conv2d(d, p["head.conv.w"], p["head.conv.b"], padding=1)

    def predict_noise(self, z: Tensor, t, label) -> Tensor:
        emb = self.embed(t, label)
        bottleneck, skips = self.encode(z, emb)
        return self.decode(bottleneck, skips, emb)

    def layers(self, h: int, w: int) -> list[Layer]:
        return unet_layers(self.cfg, h, w)


def build_unet(cfg: UNetConfig, seed: int = 0, resolution: int = 32) -> UNetModel:
    """Deterministically initialised base denoiser; the output head starts at zero."""
    rng = np.random.default_rng(seed)
    layers = unet_layers(cfg, resolution, resolution)
    arrays = init_layer_params(layers, rng, zero=("head.conv",))
    return UNetModel(cfg, ParamStore(arrays))


def predict_noise(model: UNetModel, z: Tensor, t, label) -> Tensor:
    return model.predict_noise(z, t, label)


def encode(model: UNetModel, z: Tensor, emb: Tensor):
    return model.encode(z, emb)


def decode(model: UNetModel, bottleneck: Tensor, skips: Sequence[Tensor], emb: Tensor) -> Tensor:
    return model.decode(bottleneck, skips, emb)
