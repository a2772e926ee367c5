"""Checkpoints, PPM images and JSON configuration.

Checkpoint layout (all integers little-endian)::

    b"WCAD"  u32 version  u64 header_len  header (UTF-8 JSON)  payload

The header holds ``config``, ``manifest`` (ordered ``{name, shape}`` list),
``step`` and ``rng_state``. The payload is every tensor's float32 values,
row-major, in manifest order.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError, ConfigError
from .tensor import ParamStore

MAGIC = b"WCAD"
VERSION = 1


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(store: ParamStore, config: dict, step: int, path: str | Path,
                    rng_state: Any = None, extra: dict | None = None) -> None:
    manifest = [{"name": k, "shape": list(p.shape)} for k, p in store.items()]
    header = {"config": config, "manifest": manifest, "step": int(step), "rng_state": rng_state}
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in store.items())
    atomic_write(path, MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + payload)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint file into (header, name -> array)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic (not a checkpoint file)")
    if len(raw) < 16:
        raise TruncatedCheckpointError(f"{path}: truncated before header length")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if 16 + hlen > len(raw):
        raise TruncatedCheckpointError(f"{path}: truncated inside header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: unreadable header: {exc}") from exc
    payload = memoryview(raw)[16 + hlen:]
    expected = sum(4 * int(np.prod(e["shape"], dtype=np.int64)) for e in header["manifest"])
    if expected != len(payload):
        kind = TruncatedCheckpointError if len(payload) < expected else ManifestError
        raise kind(f"{path}: manifest declares {expected} payload bytes, file has {len(payload)}")
    arrays, off = {}, 0
    for e in header["manifest"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(payload[off:off + 4 * n], dtype="<f4").astype(np.float32).reshape(e["shape"])
        off += 4 * n
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict, int]:
    header, arrays = read_checkpoint(path)
    return ParamStore(arrays), header["config"], int(header["step"])


# -- PPM ---------------------------------------------------------------------------

def to_bytes(image: np.ndarray) -> np.ndarray:
    """[-1, 1] -> {0..255} via round-half-up of (v + 1) * 127.5."""
    v = np.floor((np.asarray(image, dtype=np.float64) + 1.0) * 127.5 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def ppm_bytes(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM export needs [3, H, W], got {image.shape}")
    _, H, W = image.shape
    return f"P6\n{W} {H}\n255\n".encode("ascii") + to_bytes(image).transpose(1, 2, 0).tobytes()


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    atomic_write(path, ppm_bytes(image))


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed PPM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: malformed PPM header (expected P6, got {tokens[0]!r})")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PPM header") from exc
    if maxval != 255 or W < 1 or H < 1:
        raise ValueError(f"{path}: malformed PPM header (maxval {maxval}, size {W}x{H})")
    body = np.frombuffer(raw[pos:pos + 3 * W * H], dtype=np.uint8)
    if body.size != 3 * W * H:
        raise ValueError(f"{path}: truncated pixel data")
    return (body.reshape(H, W, 3).transpose(2, 0, 1).astype(np.float32) / 127.5 - 1.0)


# -- configuration -------------------------------------------------------------------

@dataclass
class DatasetSection:
    n: int = 2000
    base_seed: int = 0
    size: int = 32


@dataclass
class ModelSection:
    in_channels: int = 3
    base_channels: int = 16
    channel_mults: list = field(default_factory=lambda: [1, 2, 4])
    time_embed_dim: int = 128
    cond_embed_dim: int = 128
    num_scene_labels: int = 8
    groups: int = 4


@dataclass
class DiffusionSection:
    T: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    latent_mode: bool = False
    latent_channels: int = 4
    codec_steps: int = 400


@dataclass
class ControlSection:
    variant: str = "wca"
    window_sizes: Any = 4
    scale_attention: bool = True
    qkv_kernel: int = 1


@dataclass
class TrainingSection:
    epochs: int = 20
    lr: float = 3e-3
    batch: int = 8
    seed: int = 0
    steps: int = 2000
    base_steps: int = 3000
    base_lr: float = 1e-3
    optimizer: str = "adam"
    checkpoint_every: int = 0


@dataclass
class SamplingSection:
    ddim_steps: int = 20
    count: int = 8
    seed: int = 1000
    tile_seed: int = 100000


@dataclass
class EvalSection:
    variants: list = field(default_factory=lambda: ["none", "wca"])
    n_tiles: int = 64
    extractor_epochs: int = 5
    extractor_samples: int = 500
    bench_batch: int = 4
    bench_repeats: int = 10


@dataclass
class PathsSection:
    out_dir: str = "runs/default"
    checkpoint: str = "model.wcad"
    base_checkpoint: str = ""


@dataclass
class Config:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    control: ControlSection = field(default_factory=ControlSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return asdict(self)

    # derived objects
    def unet_config(self):
        from .unet import UNetConfig

        return UNetConfig(**{**asdict(self.model), "channel_mults": tuple(self.model.channel_mults)})

    def variant(self, tag: str | None = None):
        from .control import ControlVariant

        ws = self.control.window_sizes
        ws = ws if isinstance(ws, int) else tuple(ws)
        return ControlVariant(tag or self.control.variant, ws, self.control.scale_attention, self.control.qkv_kernel)

    def schedule(self):
        from .diffusion import make_schedule

        return make_schedule(self.diffusion.T, self.diffusion.beta_start, self.diffusion.beta_end)

    @property
    def model_resolution(self) -> int:
        return self.dataset.size // 4 if self.diffusion.latent_mode else self.dataset.size

    @property
    def train_steps(self) -> int:
        """Explicit ``steps`` if positive, otherwise ``epochs`` passes over the train split."""
        if self.training.steps > 0:
            return self.training.steps
        n_train = -(-9 * self.dataset.n // 10)
        return self.training.epochs * -(-n_train // self.training.batch)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not field().default_factory else f.default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, name if where == "config" else f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> Config:
    cfg = _build(Config, data, "config")
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> Config:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate_config(cfg: Config) -> None:
    """Check every downstream precondition up front."""
    from .control import VARIANTS, check_variant
    from .errors import ShapeError

    d = cfg.dataset
    _require(_is_int(d.n) and d.n >= 10, "dataset.n must be an integer >= 10")
    _require(_is_int(d.size) and d.size >= 16 and d.size & (d.size - 1) == 0,
             "dataset.size must be a power of two >= 16")
    _require(_is_int(d.base_seed) and d.base_seed >= 0, "dataset.base_seed must be a non-negative integer")
    f = cfg.diffusion
    _require(_is_int(f.T) and f.T >= 1, "diffusion.T must be an integer >= 1")
    _require(0 < f.beta_start <= f.beta_end < 1, "diffusion betas need 0 < beta_start <= beta_end < 1")
    if f.latent_mode:
        _require(d.size % 4 == 0, "latent mode needs dataset.size divisible by 4")
        _require(cfg.model.in_channels == f.latent_channels,
                 "latent mode needs model.in_channels == diffusion.latent_channels")
    else:
        _require(cfg.model.in_channels == 3, "pixel mode needs model.in_channels == 3")
    try:
        ucfg = cfg.unet_config()
        ucfg.check_resolution(cfg.model_resolution, cfg.model_resolution)
    except (ConfigError, ShapeError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    _require(all(c % ucfg.groups == 0 for c in ucfg.channels), "model: every level width must divide into groups")
    _require(cfg.model.num_scene_labels >= 8, "model.num_scene_labels must cover the 8 dataset labels")
    c = cfg.control
    _require(c.variant in VARIANTS, f"control.variant must be one of {VARIANTS}")
    try:
        v = cfg.variant()
        if c.variant == "wca":
            check_variant(v, ucfg, cfg.model_resolution, cfg.model_resolution)
    except (ConfigError, ShapeError, TypeError) as exc:
        raise ConfigError(f"control: {exc}") from exc
    t = cfg.training
    _require(_is_int(t.batch) and t.batch >= 1, "training.batch must be >= 1")
    _require(t.lr > 0 and t.base_lr > 0, "training learning rates must be positive")
    _require(_is_int(t.steps) and t.steps >= 0 and _is_int(t.epochs) and t.epochs >= 0,
             "training.steps and training.epochs must be non-negative integers")
    _require(cfg.train_steps >= 1, "training needs at least one step")
    _require(_is_int(t.base_steps) and t.base_steps >= 0, "training.base_steps must be >= 0")
    _require(t.optimizer in ("adam", "sgd"), "training.optimizer must be 'adam' or 'sgd'")
    s = cfg.sampling
    _require(_is_int(s.ddim_steps) and 1 <= s.ddim_steps <= f.T, "sampling.ddim_steps must lie in [1, T]")
    _require(_is_int(s.count) and s.count >= 1, "sampling.count must be >= 1")
    e = cfg.eval
    _require(e.bench_repeats >= 3, "eval.bench_repeats must be >= 3")
    _require(e.n_tiles >= 2 and e.extractor_samples >= 2 and e.bench_batch >= 1, "eval sizes must be positive")
    _require(isinstance(e.variants, list) and len(e.variants) >= 1 and len(set(e.variants)) == len(e.variants)
             and all(x in VARIANTS for x in e.variants), f"eval.variants must be distinct entries of {VARIANTS}")


def preset(name: str) -> Config:
    """``toy`` (desk scale, the defaults) or ``paper-protocol`` (20 epochs, lr 1e-5, batch 4)."""
    if name == "toy":
        return Config()
    if name == "paper-protocol":
        cfg = Config()
        cfg.training = TrainingSection(epochs=20, lr=1e-5, batch=4, steps=0)
        cfg.sampling = SamplingSection(ddim_steps=20)
        return cfg
    raise ConfigError(f"unknown preset {name!r}")
