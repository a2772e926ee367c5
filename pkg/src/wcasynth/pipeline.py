"""End-to-end runs behind the command line: train, sample, eval, bench, dataset export.

A checkpoint bundles every parameter of one trained system under three
prefixes: ``base/`` (denoiser), ``control/`` (adapter, absent for the
uncontrolled variant) and ``codec/`` (latent mode only).
"""
from __future__ import annotations

import copy
import csv
import io as _io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .control import ControlState, ControlVariant, build_control
from .diffusion import LatentCodec, NoiseSchedule
from .errors import CheckpointError, ConfigError
from .evaluation import benchmark, fid, mean_alignment, train_feature_extractor
from .io import Config, atomic_write, config_from_dict, read_checkpoint, save_checkpoint, write_ppm
from .tensor import ParamStore
from .training import TrainData, sample_images, train_denoiser
from .unet import UNetModel, build_unet

log = logging.getLogger(__name__)

# config fields that must agree between a checkpoint and the config using it
COMPAT_SECTIONS = ("model", "diffusion")
COMPAT_FIELDS = (("dataset", "size"),)
BASE_CHECKPOINT = "base.wcad"


@dataclass
class System:
    """A denoiser, its optional control adapter and codec, plus the config they came from."""

    cfg: Config
    base: UNetModel
    variant: ControlVariant
    state: ControlState | None
    codec: LatentCodec | None
    step: int = 0
    rng_state: dict | None = None

    @property
    def sched(self) -> NoiseSchedule:
        return self.cfg.schedule()

    def store(self) -> ParamStore:
        out = ParamStore()
        parts = [("base/", self.base.params)]
        if self.state is not None:
            parts.append(("control/", self.state.params))
        if self.codec is not None:
            parts.append(("codec/", self.codec.params_))
        for prefix, store in parts:
            for k, p in store.items():
                out[prefix + k] = p
        return out

    def sample(self, control: np.ndarray, labels: np.ndarray, seed: int, ddim_steps: int | None = None,
               batch: int = 16) -> np.ndarray:
        steps = ddim_steps or self.cfg.sampling.ddim_steps
        return sample_images(self.base, self.variant, self.state, self.sched, control, labels, steps, seed,
                             codec=self.codec, batch=batch)


def embed_strides(cfg: Config) -> tuple[int, int]:
    return (2, 2) if cfg.diffusion.latent_mode else (1, 1)


def new_system(cfg: Config, variant: str | None = None) -> System:
    """Freshly initialised system for ``cfg`` (weights seeded from ``training.seed``)."""
    seed = cfg.training.seed
    res = cfg.model_resolution
    v = cfg.variant(variant)
    base = build_unet(cfg.unet_config(), seed=seed, resolution=res)
    state = None if v.tag == "none" else build_control(base, v, seed + 1, res, embed_strides(cfg))
    codec = None
    if cfg.diffusion.latent_mode:
        codec = LatentCodec("latent", cfg.diffusion.latent_channels, seed=seed + 2)
        codec.params_
    return System(cfg, base, v, state, codec)


def check_compatible(ckpt_cfg: Config, cfg: Config) -> None:
    """Raise ConfigError naming the first architecture field that differs."""
    a, b = ckpt_cfg.to_dict(), cfg.to_dict()
    pairs = [(s, k) for s in COMPAT_SECTIONS for k in a[s]] + list(COMPAT_FIELDS)
    for sec, key in pairs:
        if a[sec][key] != b[sec][key]:
            raise ConfigError(f"incompatible checkpoint: {sec}.{key} is {a[sec][key]!r} in the checkpoint "
                              f"but {b[sec][key]!r} in the config")


def _load_into(store: ParamStore, arrays: dict[str, np.ndarray], prefix: str, path) -> None:
    got = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    want = set(store.names())
    if set(got) != want:
        missing = sorted(want - set(got))[:3]
        extra = sorted(set(got) - want)[:3]
        raise CheckpointError(f"{path}: parameters under {prefix!r} do not match the model "
                              f"(missing {missing}, unexpected {extra})")
    for k, arr in got.items():
        if store[k].shape != arr.shape:
            raise CheckpointError(f"{path}: {prefix}{k} has shape {arr.shape}, model expects {store[k].shape}")
        store[k].data = arr.copy()


def load_system(path: str | Path, cfg: Config | None = None) -> System:
    """Rebuild the system saved at ``path``; with ``cfg``, check it is compatible first."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    header, arrays = read_checkpoint(path)
    try:
        ckpt_cfg = config_from_dict(header["config"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: embedded config is invalid: {exc}") from exc
    if cfg is not None:
        check_compatible(ckpt_cfg, cfg)
    sys_ = new_system(ckpt_cfg)
    _load_into(sys_.base.params, arrays, "base/", path)
    if sys_.state is not None:
        _load_into(sys_.state.params, arrays, "control/", path)
    if sys_.codec is not None:
        _load_into(sys_.codec.params_, arrays, "codec/", path)
    sys_.step = int(header["step"])
    sys_.rng_state = header.get("rng_state")
    return sys_


def save_system(sys_: System, path: str | Path, rng: np.random.Generator | None = None) -> None:
    state = None if rng is None else rng.bit_generator.state
    save_checkpoint(sys_.store(), sys_.cfg.to_dict(), sys_.step, path, rng_state=state)


def loss_csv(losses, start: int = 0) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(losses):
        w.writerow([start + i, repr(float(v))])
    return buf.getvalue()


# -- train --------------------------------------------------------------------------------

@dataclass
class TrainResult:
    system: System
    checkpoint: Path
    loss_csv: Path
    losses: list[float]
    base_losses: list[float] = field(default_factory=list)


def model_space(sys_: System, images: np.ndarray) -> np.ndarray:
    return images if sys_.codec is None else sys_.codec.transform(images)


def train_system(cfg: Config, x0: np.ndarray, control: np.ndarray, labels: np.ndarray,
                 on_base_done=None, on_step=None, rng: np.random.Generator | None = None):
    """Fit a fresh system on in-memory arrays; returns (system, losses, base_losses).

    Control variants need a trained, frozen base: it is loaded from
    ``paths.base_checkpoint`` when set, otherwise trained here first for
    ``training.base_steps`` steps. ``on_base_done(base_system, base_losses)``
    fires after that phase.
    """
    t = cfg.training
    seed = t.seed
    sys_ = new_system(cfg)
    if sys_.codec is not None:
        sys_.codec.fit(x0, steps=cfg.diffusion.codec_steps)
    base_losses: list[float] = []
    if sys_.variant.tag != "none" and cfg.paths.base_checkpoint:
        pre = load_system(cfg.paths.base_checkpoint, cfg)
        sys_.base.params.load(pre.base.params.snapshot())
        if sys_.codec is not None and pre.codec is not None:
            sys_.codec.params_.load(pre.codec.params_.snapshot())
    data = TrainData(model_space(sys_, x0), control, labels)
    if sys_.variant.tag != "none" and not cfg.paths.base_checkpoint and t.base_steps > 0:
        base_losses = train_denoiser(sys_.base, ControlVariant("none"), None, data, sys_.sched, t.base_steps,
                                     t.batch, t.base_lr, seed, t.optimizer, rng=np.random.default_rng([seed, 0]))
        if on_base_done is not None:
            base_cfg = copy.deepcopy(cfg)
            base_cfg.control.variant = "none"
            on_base_done(System(base_cfg, sys_.base, ControlVariant("none"), None, sys_.codec, len(base_losses)),
                         base_losses)
    if sys_.variant.tag == "controlnet":
        for name, p in sys_.base.params.items():
            if name.startswith(("stem.", "enc.")):
                sys_.state.params[f"clone.{name}"].data = p.data.copy()
    rng = rng if rng is not None else np.random.default_rng([seed, 1])
    hook = None if on_step is None else (lambda step, loss: on_step(sys_, step, loss))
    losses = train_denoiser(sys_.base, sys_.variant, sys_.state, data, sys_.sched, cfg.train_steps, t.batch, t.lr,
                            seed, t.optimizer, on_step=hook, rng=rng)
    sys_.step = len(losses)
    return sys_, losses, base_losses


def run_train(cfg: Config, out_dir: str | Path | None = None, checkpoint: str | Path | None = None) -> TrainResult:
    """Train the configured variant on the synthetic train split.

    Writes the checkpoint, ``loss.csv`` and, when a base model is trained
    first, ``base_loss.csv`` and ``base.wcad``.
    """
    out = Path(out_dir or cfg.paths.out_dir)
    ckpt_path = Path(checkpoint) if checkpoint else out / cfg.paths.checkpoint
    ds = D.make_dataset(cfg.dataset.n, cfg.dataset.base_seed, cfg.dataset.size)
    x0, control, labels = D.stack(ds.train)
    rng = np.random.default_rng([cfg.training.seed, 1])
    every = cfg.training.checkpoint_every

    def on_base_done(base_sys: System, base_losses: list[float]) -> None:
        atomic_write(out / "base_loss.csv", loss_csv(base_losses).encode())
        save_system(base_sys, out / BASE_CHECKPOINT)

    def on_step(sys_: System, step: int, _loss: float) -> None:
        if every and (step + 1) % every == 0:
            sys_.step = step + 1
            save_system(sys_, ckpt_path, rng)

    sys_, losses, base_losses = train_system(cfg, x0, control, labels, on_base_done, on_step, rng)
    save_system(sys_, ckpt_path, rng)
    csv_path = out / "loss.csv"
    atomic_write(csv_path, loss_csv(losses).encode())
    return TrainResult(sys_, ckpt_path, csv_path, losses, base_losses)


# -- sample --------------------------------------------------------------------------------

def control_to_image(raster: np.ndarray) -> np.ndarray:
    """Palette raster in [0, 1] -> [-1, 1] image convention for PPM export."""
    return raster * 2.0 - 1.0


def run_sample(cfg: Config, checkpoint: str | Path, out_dir: str | Path | None = None) -> Path:
    """Write ``sampling.count`` generated images with their control rasters; returns the index path."""
    sys_ = load_system(checkpoint, cfg)
    out = Path(out_dir or cfg.paths.out_dir)
    s = cfg.sampling
    tile_seeds = [s.tile_seed + i for i in range(s.count)]
    samples = [D.make_sample(ts, cfg.dataset.size) for ts in tile_seeds]
    _, control, labels = D.stack(samples)
    images = sys_.sample(control, labels, s.seed)
    entries = []
    for i, (img, smp) in enumerate(zip(images, samples)):
        name, ctl = f"sample_{i:06d}.ppm", f"control_{i:06d}.ppm"
        write_ppm(img, out / name)
        write_ppm(control_to_image(smp.tile.raster), out / ctl)
        entries.append({"index": i, "seed": s.seed + i, "tile_seed": smp.seed, "label": smp.label,
                        "sample": name, "control": ctl})
    index = out / "index.json"
    meta = {"variant": sys_.variant.label, "ddim_steps": s.ddim_steps, "checkpoint_step": sys_.step,
            "samples": entries}
    atomic_write(index, json.dumps(meta, indent=2).encode())
    return index


# -- eval ------------------------------------------------------------------------------------

def _systems_by_variant(cfg: Config, checkpoints) -> dict[str, System]:
    systems: dict[str, System] = {}
    for path in checkpoints:
        sys_ = load_system(path, cfg)
        systems[sys_.variant.tag] = sys_
    missing = [v for v in cfg.eval.variants if v not in systems]
    if missing:
        raise CheckpointError(f"missing checkpoint for variant(s) {', '.join(missing)}")
    return {v: systems[v] for v in cfg.eval.variants}


def eval_tiles(cfg: Config) -> list[D.Sample]:
    """Held-out tiles: seeds right after the training split, so they never overlap it."""
    n_train = -(-9 * cfg.dataset.n // 10)
    return [D.make_sample(cfg.dataset.base_seed + n_train + i, cfg.dataset.size) for i in range(cfg.eval.n_tiles)]


def _row(method: str, fid_value: float, mean_iou: float, per: dict[str, float]) -> dict:
    return {"method": method, "fid": float(fid_value), "mean_iou": float(mean_iou),
            "per_class_iou": {c: float(per.get(c, float("nan"))) for c in D.CLASS_NAMES}}


def table_csv(rows: list[dict]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "fid", "mean_iou"] + [f"iou_{c}" for c in D.CLASS_NAMES])
    for r in rows:
        w.writerow([r["method"], f"{r['fid']:.6f}", f"{r['mean_iou']:.6f}"]
                   + [f"{r['per_class_iou'][c]:.6f}" for c in D.CLASS_NAMES])
    return buf.getvalue()


def run_eval(cfg: Config, checkpoints, out_dir: str | Path | None = None) -> dict:
    """Matched samples per variant on held-out tiles; FID and alignment IoU table."""
    systems = _systems_by_variant(cfg, checkpoints)
    out = Path(out_dir or cfg.paths.out_dir)
    tiles = eval_tiles(cfg)
    real, control, labels = D.stack(tiles)
    ds = D.make_dataset(cfg.dataset.n, cfg.dataset.base_seed, cfg.dataset.size)
    x_tr, _, y_tr = D.stack(ds.train[:cfg.eval.extractor_samples])
    extractor = train_feature_extractor(x_tr, y_tr, epochs=cfg.eval.extractor_epochs, seed=cfg.training.seed)
    geo = [s.tile for s in tiles]
    m, per = mean_alignment(list(real), geo)
    rows = [_row("real data", fid(extractor, real, real), m, per)]
    for tag, sys_ in systems.items():
        gen = sys_.sample(control, labels, cfg.sampling.seed)
        m, per = mean_alignment(list(gen), geo)
        rows.append(_row(sys_.variant.label, fid(extractor, real, gen), m, per))
    result = {"n_tiles": len(tiles), "ddim_steps": cfg.sampling.ddim_steps, "sampling_seed": cfg.sampling.seed,
              "rows": rows}
    atomic_write(out / "metrics.json", json.dumps(result, indent=2).encode())
    atomic_write(out / "table.csv", table_csv(rows).encode())
    return result


# -- bench -----------------------------------------------------------------------------------

BENCH_COLUMNS = ["method", "size", "params_trainable", "time_per_batch_ms", "time_std_ms", "peak_bytes", "flops"]


def run_bench(cfg: Config, checkpoints=(), out_dir: str | Path | None = None) -> list[dict]:
    """Runtime table per variant. Without checkpoints, freshly initialised models
    of every ``eval.variants`` entry are timed (cost does not depend on weight values)."""
    if checkpoints:
        systems = list(_systems_by_variant(cfg, checkpoints).values())
    else:
        systems = [new_system(cfg, v) for v in cfg.eval.variants]
    rows = []
    for sys_ in systems:
        st = benchmark(sys_.base, sys_.variant, sys_.state, sys_.sched, batch=cfg.eval.bench_batch,
                       ddim_steps=cfg.sampling.ddim_steps, repeats=cfg.eval.bench_repeats,
                       seed=cfg.sampling.seed, resolution=cfg.dataset.size, codec=sys_.codec)
        rows.append({"method": st.variant, "size": st.params_total, "params_trainable": st.params_trainable,
                     "time_per_batch_ms": round(st.time_ms_mean, 3), "time_std_ms": round(st.time_ms_std, 3),
                     "peak_bytes": st.peak_bytes, "flops": st.flops})
    buf = _io.StringIO()
    w = csv.DictWriter(buf, BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write(Path(out_dir or cfg.paths.out_dir) / "bench.csv", buf.getvalue().encode())
    return rows


# -- dataset -----------------------------------------------------------------------------------

def run_dataset(cfg: Config, out_dir: str | Path | None = None) -> Path:
    ds = D.make_dataset(cfg.dataset.n, cfg.dataset.base_seed, cfg.dataset.size)
    return D.export_dataset(ds, out_dir or cfg.paths.out_dir)
