"""Metrics and efficiency accounting.

FLOP table (per single sample; batch multiplies every entry):

============  ===============================================
kind          FLOPs
============  ===============================================
conv2d        2 * Cout * Cin * kh * kw * H' * W'
linear        2 * in * out
matmul        2 * m * k * n
attention     windows * (2*T*T*C + 2*T*T*C + 5*T*T)
              (Q K^T, A V, softmax at 5 per element)
softmax       5 per element
norm          5 per element
elementwise   1 per element
embedding     0 (table lookup)
upsample      0 (data movement)
============  ===============================================
"""
from __future__ import annotations

import logging
import time
import tracemalloc
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as tn
from .data import NUM_CLASSES, NUM_SCENE_LABELS, GeometryTile, class_mask
from .errors import NumericalError, ShapeError
from .tensor import ParamStore, Tensor
from .unet import Layer

log = logging.getLogger(__name__)

FEATURE_DIM = 64


# -- feature extractor -----------------------------------------------------------------

class FeatureExtractor(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Small conv classifier over scene labels; ``transform`` yields pooled 64-d features."""

    def __init__(self, epochs: int = 5, batch_size: int = 32, lr: float = 1e-2, seed: int = 0,
                 n_classes: int = NUM_SCENE_LABELS):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.n_classes = n_classes

    def _init(self) -> ParamStore:
        rng = np.random.default_rng(self.seed)

        def u(shape, fan_in):
            b = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-b, b, shape).astype(np.float32)

        return ParamStore({
            "c0.w": u((16, 3, 3, 3), 27), "c0.b": np.zeros(16),
            "c1.w": u((32, 16, 3, 3), 144), "c1.b": np.zeros(32),
            "c2.w": u((FEATURE_DIM, 32, 3, 3), 288), "c2.b": np.zeros(FEATURE_DIM),
            "fc.w": u((self.n_classes, FEATURE_DIM), FEATURE_DIM), "fc.b": np.zeros(self.n_classes),
        })

    def _features(self, x: Tensor) -> Tensor:
        p = self.params_
        h = tn.silu(tn.conv2d(x, p["c0.w"], p["c0.b"], padding=1))
        h = tn.silu(tn.conv2d(h, p["c1.w"], p["c1.b"], stride=2, padding=1))
        h = tn.silu(tn.conv2d(h, p["c2.w"], p["c2.b"], stride=2, padding=1))
        return tn.mean(h, axis=(2, 3))

    def _logits(self, x: Tensor) -> Tensor:
        return tn.linear(self._features(x), self.params_["fc.w"], self.params_["fc.b"])

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 4 or len(X) != len(y):
            raise ShapeError(f"expected images [n, 3, H, W] and n labels, got {X.shape} / {y.shape}")
        self.params_ = self._init()
        opt = tn.Adam(self.params_, lr=self.lr)
        rng = np.random.default_rng(self.seed)
        self.loss_history_ = []
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            for lo in range(0, len(X), self.batch_size):
                idx = order[lo:lo + self.batch_size]
                with tn.Tape() as tape:
                    loss = tn.cross_entropy(self._logits(Tensor(X[idx])), y[idx])
                opt.zero_grad()
                tn.backward(loss, tape)
                tape.clear()
                opt.step()
                self.loss_history_.append(float(loss.item()))
        self.train_accuracy_ = float(self.score(X, y))
        return self

    def transform(self, X, batch: int = 64) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=np.float32)
        with tn.no_grad():
            return np.concatenate([self._features(Tensor(X[i:i + batch])).data
                                   for i in range(0, len(X), batch)]).astype(np.float64)

    def predict(self, X, batch: int = 64) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=np.float32)
        with tn.no_grad():
            return np.concatenate([self._logits(Tensor(X[i:i + batch])).data.argmax(axis=1)
                                   for i in range(0, len(X), batch)])


def train_feature_extractor(images: np.ndarray, labels: np.ndarray, epochs: int = 5,
                            seed: int = 0) -> FeatureExtractor:
    return FeatureExtractor(epochs=epochs, seed=seed).fit(images, labels)


# -- Frechet distance ------------------------------------------------------------------------

@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(features: np.ndarray) -> GaussianFit:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError(f"need at least 2 feature rows, got shape {f.shape}")
    mu = f.mean(axis=0)
    d = f - mu
    cov = d.T @ d / (f.shape[0] - 1)
    return GaussianFit(mu, 0.5 * (cov + cov.T))


def _eigh(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        return np.linalg.eigh(0.5 * (m + m.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix, negative eigenvalues clamped to zero."""
    w, v = _eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(g1: GaussianFit, g2: GaussianFit) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace term uses the symmetric form ``(S1^(1/2) S2 S1^(1/2))^(1/2)``,
    which has the same eigenvalues as ``(S1 S2)^(1/2)``.
    """
    diff = g1.mean - g2.mean
    r1 = sqrtm_psd(g1.cov)
    w, _ = _eigh(r1 @ g2.cov @ r1)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    d = float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * tr_sqrt)
    if d < -1e-4:
        log.warning("negative Frechet distance %.3g clamped to 0", d)
    return max(d, 0.0)


def fid(extractor: FeatureExtractor, real_images: np.ndarray, gen_images: np.ndarray) -> float:
    if len(real_images) == 0 or len(gen_images) == 0:
        raise ValueError("fid needs non-empty image sets")
    for n in (len(real_images), len(gen_images)):
        if n < FEATURE_DIM + 1:
            log.warning("only %d images; covariance of %d-d features is rank deficient", n, FEATURE_DIM)
    return frechet_distance(fit_gaussian(extractor.transform(real_images)),
                            fit_gaussian(extractor.transform(gen_images)))


# -- alignment -----------------------------------------------------------------------

def iou_per_class(pred: np.ndarray, truth: np.ndarray) -> dict[int, float]:
    """IoU for every class present in either mask."""
    out = {}
    for k in range(NUM_CLASSES):
        a, b = pred == k, truth == k
        union = int((a | b).sum())
        if union:
            out[k] = int((a & b).sum()) / union
    return out


def alignment_iou(gen_image: np.ndarray, tile: GeometryTile) -> tuple[dict[int, float], float]:
    """Per-class IoU between the segmented image and the tile, and their mean over the tile's classes."""
    gen_image = np.asarray(gen_image)
    if gen_image.shape[1:] != tile.class_map.shape or gen_image.shape[0] != 3:
        raise ShapeError(f"image {gen_image.shape} does not match tile {tile.class_map.shape}")
    per = iou_per_class(class_mask(gen_image), tile.class_map)
    present = np.unique(tile.class_map)
    return per, float(np.mean([per[int(k)] for k in present]))


def mean_alignment(images: Sequence[np.ndarray], tiles: Sequence[GeometryTile]) -> tuple[float, dict[str, float]]:
    """Mean IoU over images, plus the per-class mean over the images where the class occurs."""
    from .data import CLASS_NAMES

    means, per_class = [], {name: [] for name in CLASS_NAMES}
    for img, tile in zip(images, tiles):
        per, m = alignment_iou(img, tile)
        means.append(m)
        for k, v in per.items():
            per_class[CLASS_NAMES[k]].append(v)
    return float(np.mean(means)), {k: float(np.mean(v)) for k, v in per_class.items() if v}


# -- accounting ---------------------------------------------------------------------------

def layer_params(L: Layer) -> int:
    if L.name.startswith("shared:"):
        return 0
    if L.kind == "conv2d":
        return L.cout * L.cin * L.k * L.k + (L.cout if L.bias else 0)
    if L.kind == "linear":
        return L.cout * L.cin + L.cout
    if L.kind == "embedding":
        return int(np.prod(L.dims))
    if L.kind == "norm":
        return 2 * L.cout
    if L.kind in ("elementwise", "attention", "softmax", "matmul", "upsample"):
        return 0
    raise ValueError(f"unknown layer kind {L.kind!r}")


def layer_flops(L: Layer) -> int:
    if L.kind == "conv2d":
        return 2 * L.cout * L.cin * L.k * L.k * L.out_hw[0] * L.out_hw[1]
    if L.kind == "linear":
        return 2 * L.cin * L.cout
    if L.kind == "matmul":
        m, k, n = L.dims
        return 2 * m * k * n
    if L.kind == "attention":
        windows, T, C = L.dims
        return windows * (4 * T * T * C + 5 * T * T)
    if L.kind in ("softmax", "norm"):
        return 5 * L.elements
    if L.kind == "elementwise":
        return L.elements
    if L.kind in ("embedding", "upsample"):
        return 0
    raise ValueError(f"unknown layer kind {L.kind!r}")


def count_params(model, trainable_only: bool = False) -> int:
    """Parameter count of a :class:`ParamStore` or of an analytic layer list."""
    if isinstance(model, ParamStore):
        return model.num_elements(trainable_only)
    return int(sum(layer_params(L) for L in model))


def count_flops(layers: Sequence[Layer], batch: int = 1) -> int:
    return int(batch) * int(sum(layer_flops(L) for L in layers))


def reference_network() -> list[Layer]:
    """Three-layer network with hand-derived counts, used to check the counter.

    ====================  ==============================  ======  ======
    layer                 shape                           params  FLOPs
    ====================  ==============================  ======  ======
    conv 3x3, 3 -> 8      16x16 out, bias                 224     110592
    SiLU                  8 x 16 x 16                     0       2048
    conv 1x1, 8 -> 1      16x16 out, bias                 9       4096
    total                                                 233     116736
    ====================  ==============================  ======  ======
    """
    from .unet import conv_layer

    return [conv_layer("conv1", 3, 8, 3, (16, 16)),
            Layer("elementwise", "act", elements=8 * 16 * 16),
            conv_layer("conv2", 8, 1, 1, (16, 16))]


# -- benchmark ---------------------------------------------------------------------------

@dataclass
class RuntimeStats:
    variant: str
    time_ms_mean: float
    time_ms_std: float
    params_total: int
    params_trainable: int
    flops: int
    peak_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


def benchmark(base, variant, state, sched, batch: int = 4, ddim_steps: int = 20, repeats: int = 10,
              seed: int = 0, resolution: int = 32, warmup: int = 2, codec=None) -> RuntimeStats:
    """Time full DDIM sampling calls and report size, FLOP and peak-memory figures."""
    from .control import adapter_layers
    from .training import sample_images

    if repeats < 3:
        raise ValueError("benchmark needs at least 3 timed repeats")
    rng = np.random.default_rng(seed)
    control = rng.uniform(0, 1, (batch, 3, resolution, resolution)).astype(np.float32)
    labels = rng.integers(0, base.cfg.num_scene_labels, size=batch)

    def run():
        sample_images(base, variant, state, sched, control, labels, ddim_steps, seed, codec=codec, batch=batch)

    for _ in range(warmup):
        run()
    times = []
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        for _ in range(repeats):
            t0 = time.perf_counter()
            run()
            times.append((time.perf_counter() - t0) * 1000.0)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    res = resolution // 4 if codec is not None and codec.mode != "pixel" else resolution
    base_layers = base.layers(res, res)
    strides = state.embed_strides if state is not None else (1, 1)
    extra = adapter_layers(variant, base.cfg, res, res, strides)
    adapter = count_params(extra)
    total = count_params(base_layers) + adapter
    trainable = total if variant.tag == "none" else adapter
    return RuntimeStats(variant.label, float(np.mean(times)), float(np.std(times)), total, trainable,
                        count_flops(base_layers + extra, batch) * ddim_steps, int(peak))
