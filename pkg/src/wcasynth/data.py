"""Procedural geometry tiles paired with rendered targets and scene labels.

Randomness comes from a portable 64-bit splitmix generator so the same seed
yields the same scene on every platform:

    state <- state + 0x9E3779B97F4A7C15            (mod 2**64)
    z <- (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB
    out <- z ^ (z >> 31)

``uniform()`` returns ``(out >> 11) * 2**-53``.

Scene labels are a 3-bit code: bit 0 = water body present, bit 1 =
vegetation present, bit 2 = dense buildings (4-6 instead of 0-1).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

BACKGROUND, ROAD, BUILDING, WATER, VEGETATION = range(5)
CLASS_NAMES = ("background", "road", "building", "water", "vegetation")
NUM_CLASSES = 5
NUM_SCENE_LABELS = 8

# control raster palette (flat colours, painter's order below)
PALETTE = np.array([
    (0.9, 0.9, 0.9),
    (0.2, 0.2, 0.2),
    (0.8, 0.3, 0.2),
    (0.3, 0.5, 0.9),
    (0.4, 0.7, 0.4),
], dtype=np.float32)

# target base colours in [-1, 1]; pairwise distances >= 0.75
TARGET_COLORS = np.array([
    (0.3, 0.2, -0.2),
    (-0.5, -0.5, -0.5),
    (0.7, 0.7, 0.7),
    (-0.7, -0.4, 0.3),
    (-0.3, 0.4, -0.6),
], dtype=np.float32)

NOISE_AMPLITUDE = 0.15
NOISE_CELL = 8


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix(self.state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Integer in the closed range [lo, hi]."""
        return lo + int(self.uniform() * (hi - lo + 1))

    def range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()


def hash_uniform(*keys: int) -> float:
    """Stateless uniform in [0, 1) from a tuple of integer keys."""
    z = 0
    for k in keys:
        z = _mix((z + GOLDEN + (k & MASK64)) & MASK64)
    return (z >> 11) * (1.0 / (1 << 53))


@dataclass
class Primitive:
    kind: str                      # road | building | water | vegetation
    points: list[tuple[float, float]]  # polyline, rectangle corners or polygon (x, y)
    width: float = 0.0             # roads only

    @property
    def cls(self) -> int:
        return CLASS_NAMES.index(self.kind)


@dataclass
class SceneSpec:
    seed: int
    size: int
    scene_label: int
    primitives: list[Primitive] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "size": self.size, "scene_label": self.scene_label,
                "primitives": [asdict(p) for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = [Primitive(p["kind"], [tuple(q) for q in p["points"]], p.get("width", 0.0))
                 for p in d["primitives"]]
        return cls(d["seed"], d["size"], d["scene_label"], prims)


@dataclass
class GeometryTile:
    raster: np.ndarray     # [3, size, size] palette colours
    class_map: np.ndarray  # [size, size] int


@dataclass
class Sample:
    x0: np.ndarray         # [3, size, size] in [-1, 1]
    tile: GeometryTile
    label: int
    seed: int


# -- scene generation -------------------------------------------------------------

def _edge_point(rng: SplitMix64, edge: int, size: int) -> tuple[float, float]:
    u = rng.range(0.1 * size, 0.9 * size)
    return [(u, 0.0), (float(size), u), (u, float(size)), (0.0, u)][edge]


def _road(rng: SplitMix64, size: int) -> Primitive:
    e0 = rng.randint(0, 3)
    e1 = (e0 + rng.randint(1, 3)) % 4
    a, b = _edge_point(rng, e0, size), _edge_point(rng, e1, size)
    mid = ((a[0] + b[0]) / 2 + rng.range(-0.1, 0.1) * size,
           (a[1] + b[1]) / 2 + rng.range(-0.1, 0.1) * size)
    mid = (min(max(mid[0], 0.0), float(size)), min(max(mid[1], 0.0), float(size)))
    width = rng.range(0.06, 0.12) * size
    return Primitive("road", [a, mid, b], width)


def _building(rng: SplitMix64, size: int) -> Primitive:
    w = rng.randint(max(2, size // 10), max(3, size // 4))
    h = rng.randint(max(2, size // 10), max(3, size // 4))
    x0 = rng.randint(0, size - w)
    y0 = rng.randint(0, size - h)
    return Primitive("building", [(float(x0), float(y0)), (float(x0 + w), float(y0 + h))])


def _blob(rng: SplitMix64, size: int, kind: str) -> Primitive:
    r = rng.range(size / 8, size / 4)
    cx = rng.range(r, size - r)
    cy = rng.range(r, size - r)
    pts = []
    k = 8
    for j in range(k):
        ang = 2 * math.pi * j / k
        rr = r * (0.7 + 0.6 * rng.uniform())
        x = min(max(cx + rr * math.cos(ang), 0.0), float(size))
        y = min(max(cy + rr * math.sin(ang), 0.0), float(size))
        pts.append((x, y))
    return Primitive(kind, pts)


def generate_scene(seed: int, size: int = 32) -> SceneSpec:
    """Deterministic random scene; the label controls which layers appear."""
    if size < 16 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 16, got {size}")
    rng = SplitMix64(seed)
    label = rng.randint(0, NUM_SCENE_LABELS - 1)
    prims: list[Primitive] = []
    if label & 1:
        prims.append(_blob(rng, size, "water"))
    if label & 2:
        for _ in range(rng.randint(1, 2)):
            prims.append(_blob(rng, size, "vegetation"))
    for _ in range(rng.randint(1, 3)):
        prims.append(_road(rng, size))
    n_build = rng.randint(4, 6) if label & 4 else rng.randint(0, 1)
    for _ in range(n_build):
        prims.append(_building(rng, size))
    return SceneSpec(seed, size, label, prims)


# -- rasterization ---------------------------------------------------------------

_PAINT_ORDER = ("water", "vegetation", "road", "building")


def polygon_crossings(points, py: float) -> list[float]:
    """x positions where the horizontal line y = py crosses polygon edges."""
    xs = []
    n = len(points)
    for a in range(n):
        xi, yi = points[a]
        xj, yj = points[a - 1]
        if (yi > py) != (yj > py):
            xs.append(xi + (py - yi) * (xj - xi) / (yj - yi))
    return sorted(xs)


def _fill_polygon(mask: np.ndarray, points) -> None:
    size_y, size_x = mask.shape
    px = np.arange(size_x) + 0.5
    for row in range(size_y):
        xs = polygon_crossings(points, row + 0.5)
        for a, b in zip(xs[0::2], xs[1::2]):
            mask[row] |= (px >= a) & (px < b)


def _segment_distance(px: np.ndarray, py: float, a, b) -> np.ndarray:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return np.hypot(px - ax, py - ay)
    u = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0)
    return np.hypot(px - (ax + u * dx), py - (ay + u * dy))


def _fill_road(mask: np.ndarray, prim: Primitive) -> None:
    size_y, size_x = mask.shape
    px = np.arange(size_x) + 0.5
    half = prim.width / 2
    for row in range(size_y):
        for a, b in zip(prim.points[:-1], prim.points[1:]):
            mask[row] |= _segment_distance(px, row + 0.5, a, b) <= half


def primitive_mask(prim: Primitive, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if prim.kind == "road":
        _fill_road(mask, prim)
    elif prim.kind == "building":
        (x0, y0), (x1, y1) = prim.points
        mask[int(y0):int(y1), int(x0):int(x1)] = True
    else:
        _fill_polygon(mask, prim.points)
    return mask


def class_map_of(spec: SceneSpec) -> np.ndarray:
    cmap = np.full((spec.size, spec.size), BACKGROUND, dtype=np.int64)
    for kind in _PAINT_ORDER:
        for prim in spec.primitives:
            if prim.kind == kind:
                cmap[primitive_mask(prim, spec.size)] = prim.cls
    return cmap


def render_control(spec: SceneSpec) -> GeometryTile:
    cmap = class_map_of(spec)
    raster = PALETTE[cmap].transpose(2, 0, 1).copy()
    return GeometryTile(raster=raster, class_map=cmap)


def value_noise(seed: int, cls: int, size: int, cell: int = NOISE_CELL) -> np.ndarray:
    """Smooth lattice noise in [-1, 1] hashed from (seed, class)."""
    n = size // cell + 2
    lattice = np.array([[2.0 * hash_uniform(seed, cls, ix, iy) - 1.0 for ix in range(n)] for iy in range(n)])
    coords = (np.arange(size) + 0.5) / cell
    i0 = np.floor(coords).astype(int)
    f = coords - i0
    f = f * f * (3 - 2 * f)
    top = lattice[i0][:, i0] * (1 - f)[None, :] + lattice[i0][:, i0 + 1] * f[None, :]
    bot = lattice[i0 + 1][:, i0] * (1 - f)[None, :] + lattice[i0 + 1][:, i0 + 1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def render_target(spec: SceneSpec, noise_amplitude: float = NOISE_AMPLITUDE) -> np.ndarray:
    """Textured "satellite" rendering of ``spec`` in [-1, 1], shape [3, size, size]."""
    cmap = class_map_of(spec)
    img = TARGET_COLORS[cmap].astype(np.float64)
    if noise_amplitude:
        tex = np.zeros((spec.size, spec.size))
        for cls in range(NUM_CLASSES):
            sel = cmap == cls
            if sel.any():
                tex[sel] = value_noise(spec.seed, cls, spec.size)[sel]
        img = img + noise_amplitude * tex[..., None]
    return np.clip(img, -1.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def class_mask(image: np.ndarray) -> np.ndarray:
    """Nearest target base colour per pixel (Euclidean in RGB)."""
    img = np.asarray(image, dtype=np.float64)
    d = ((img[None] - TARGET_COLORS.astype(np.float64)[:, :, None, None]) ** 2).sum(axis=1)
    return d.argmin(axis=0).astype(np.int64)


# -- datasets --------------------------------------------------------------------

def make_sample(seed: int, size: int = 32) -> Sample:
    spec = generate_scene(seed, size)
    return Sample(x0=render_target(spec), tile=render_control(spec), label=spec.scene_label, seed=seed)


@dataclass
class Dataset:
    samples: list[Sample]
    n_train: int

    @property
    def train(self) -> list[Sample]:
        return self.samples[:self.n_train]

    @property
    def eval(self) -> list[Sample]:
        return self.samples[self.n_train:]

    def __len__(self) -> int:
        return len(self.samples)


def make_dataset(n: int, base_seed: int = 0, size: int = 32) -> Dataset:
    """``n`` samples with seeds ``base_seed + i``; the first ceil(0.9 n) form the train split."""
    if n < 10:
        raise ValueError(f"dataset needs at least 10 samples, got {n}")
    samples = [make_sample(base_seed + i, size) for i in range(n)]
    return Dataset(samples, math.ceil(0.9 * n))


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(targets [B,3,H,W], control rasters [B,3,H,W], labels [B])."""
    return (np.stack([s.x0 for s in samples]),
            np.stack([s.tile.raster for s in samples]),
            np.array([s.label for s in samples], dtype=np.int64))


def export_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    """Write paired PPM files plus ``index.json``; returns the index path."""
    from .io import write_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(ds.samples):
        tgt = out / f"sample_{i:06d}_target.ppm"
        ctl = out / f"sample_{i:06d}_control.ppm"
        write_ppm(s.x0, tgt)
        write_ppm(s.tile.raster * 2.0 - 1.0, ctl)
        entries.append({"index": i, "seed": s.seed, "label": s.label,
                        "split": "train" if i < ds.n_train else "eval",
                        "target": tgt.name, "control": ctl.name})
    index = out / "index.json"
    meta = {"n": len(ds), "n_train": ds.n_train, "control_encoding": "2 * palette - 1", "samples": entries}
    index.write_text(json.dumps(meta, indent=2))
    return index
