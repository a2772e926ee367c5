"""Acceptance criteria 1-12, one test per criterion.

A line ``criterion NN: PASS|FAIL  <detail>`` is printed for each one at the
end of the run (see ``pytest_terminal_summary`` in conftest.py).
"""
import copy
import time

import numpy as np
import pytest
from gradcases import OPS

from wcasynth import data as D
from wcasynth import pipeline
from wcasynth import tensor as tn
from wcasynth.control import (ControlVariant, adapter_layers, controlled_predict_noise, mix_skip, wca_alpha,
                              windowed_cross_attention)
from wcasynth.diffusion import ddim_sample, forward_diffuse, make_schedule, training_loss
from wcasynth.evaluation import (GaussianFit, count_flops, frechet_distance, layer_flops, mean_alignment,
                                 fid, reference_network, train_feature_extractor)
from wcasynth.io import load_checkpoint, preset, read_checkpoint, save_checkpoint
from wcasynth.tensor import Tensor
from wcasynth.training import TrainData, model_fn_for, train_denoiser

pytestmark = pytest.mark.acceptance

TOY = preset("toy")


@pytest.fixture
def detail(request):
    """Free-text detail attached to the criterion's summary line."""
    lines = []
    request.node.criterion_detail = lines
    return lines


def randomize(store, names, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for n in names:
        p = store[n]
        p.data = rng.uniform(-scale, scale, p.shape).astype(np.float32)


def live_system(tag, seed=0):
    """Toy-config system with nonzero head and adapter outputs, so every path is exercised."""
    sys_ = pipeline.new_system(TOY, tag)
    randomize(sys_.base.params, ["head.conv.w"], seed)
    if sys_.state is not None:
        names = [n for n in sys_.state.params.names() if n.endswith(("out.w", "out.b")) or n.startswith("embed.2")]
        randomize(sys_.state.params, names, seed + 1)
    return sys_


def rel_err(a, b):
    return tn.max_relative_error(np.asarray(a, np.float64), np.asarray(b, np.float64), floor=1e-12)


# -- 1 ----------------------------------------------------------------------------------

def test_criterion_01_base_recovery(detail):
    t0 = time.perf_counter()
    worst = 0.0
    for tag in ("wca", "smartcontrol"):
        sys_ = live_system(tag)
        sys_.state.force_alpha_zero = True
        rng = np.random.default_rng(1)
        for _ in range(20):
            z = Tensor(rng.standard_normal((1, 3, 32, 32)))
            t = int(rng.integers(1, TOY.diffusion.T + 1))
            c = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)))
            lab = int(rng.integers(0, 8))
            a = controlled_predict_noise(sys_.base, sys_.variant, sys_.state, z, t, lab, c).data
            b = sys_.base.predict_noise(z, t, lab).data
            worst = max(worst, rel_err(a, b))
    elapsed = time.perf_counter() - t0
    detail.append(f"max rel err {worst:.2e} (< 1e-6), {elapsed:.1f}s (< 10s)")
    assert worst < 1e-6
    assert elapsed < 10


# -- 2 ----------------------------------------------------------------------------------

def test_criterion_02_controlnet_init_equivalence(detail):
    t0 = time.perf_counter()
    sys_ = pipeline.new_system(TOY, "controlnet")
    randomize(sys_.base.params, ["head.conv.w"], 0)
    rng = np.random.default_rng(2)
    same = 0
    for _ in range(10):
        z = Tensor(rng.standard_normal((2, 3, 32, 32)))
        t, lab = rng.integers(1, 201, 2), rng.integers(0, 8, 2)
        c = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)))
        a = controlled_predict_noise(sys_.base, sys_.variant, sys_.state, z, t, lab, c).data
        same += a.tobytes() == sys_.base.predict_noise(z, t, lab).data.tobytes()
    elapsed = time.perf_counter() - t0
    detail.append(f"{same}/10 batches bit-identical, {elapsed:.1f}s (< 10s)")
    assert same == 10
    assert elapsed < 10


# -- 3 ----------------------------------------------------------------------------------

def test_criterion_03_window_bijection(detail):
    t0 = time.perf_counter()
    cases = 0
    rng = np.random.default_rng(3)
    for H in (8, 16, 32):
        for W in (8, 16, 32):
            for ws in (2, 4, 8):
                x = Tensor(rng.standard_normal((2, 3, H, W)))
                back = tn.window_merge(tn.window_partition(x, ws), ws, x.shape)
                assert back.data.tobytes() == x.data.tobytes(), (H, W, ws)
                cases += 1
    elapsed = time.perf_counter() - t0
    detail.append(f"{cases} (H, W, ws) cases exact, {elapsed:.2f}s (< 5s)")
    assert elapsed < 5


# -- 4 ----------------------------------------------------------------------------------

def _probe_error(f, x, probes, seed):
    """Relative error between backward() and central differences on ``probes`` entries of ``x``."""
    x.grad = None
    with tn.Tape() as tape:
        loss = f(x)
    tn.backward(loss, tape)
    tape.clear()
    idx = np.random.default_rng(seed).choice(x.size, size=min(probes, x.size), replace=False)
    numeric = tn.finite_diff_grad(f, x, indices=idx)
    analytic = np.zeros(len(idx)) if x.grad is None else x.grad.reshape(-1)[idx]
    return tn.max_relative_error(analytic, numeric)


def test_criterion_04_gradients(detail, gradcheck):
    t0 = time.perf_counter()
    errors = {}
    for name, (f, make) in OPS.items():
        errors[name] = max(gradcheck(f, make(), probes=6, seed=p) for p in range(5))

    # full WCA block: alpha map and mixed skip
    rng = np.random.default_rng(4)
    sys_ = live_system("wca")
    prm = sys_.state.params
    s = Tensor(rng.uniform(-1, 1, (1, 16, 32, 32)), requires_grad=True)
    s_ctr = Tensor(rng.uniform(-1, 1, (1, 16, 32, 32)), requires_grad=True)

    def block(_):
        return tn.sum(tn.square(mix_skip(s, s_ctr, wca_alpha(s, s_ctr, prm, 0, 4))))
    for n in ("wca.0.q.w", "wca.0.k.w", "wca.0.v.w", "wca.0.out.w", "wca.0.out.b"):
        errors[f"wca_block:{n}"] = _probe_error(block, prm[n], 5, 0)
    errors["wca_block:s"] = _probe_error(block, s, 5, 1)
    errors["wca_block:s_ctr"] = _probe_error(block, s_ctr, 5, 2)

    def attn(_):
        return tn.sum(tn.square(windowed_cross_attention(s, s_ctr, prm, 0, 4)))
    errors["wca_attention:s_ctr"] = _probe_error(attn, s_ctr, 5, 3)

    # full controlled training loss, frozen base
    sys_.base.params.set_trainable(False)
    x0 = rng.uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
    c = rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    eta = rng.standard_normal(x0.shape).astype(np.float32)
    fn = model_fn_for(sys_.base, sys_.variant, sys_.state)
    sched = TOY.schedule()

    def loss(_):
        return training_loss(fn, x0, np.array([17, 150]), eta, (np.array([1, 5]), c), sched)
    for n in ("embed.0.w", "embed.2.w", "wca.0.q.w", "wca.1.k.w", "wca.2.v.w", "wca.2.out.w"):
        errors[f"train_loss:{n}"] = _probe_error(loss, prm[n], 5, 4)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    detail.append(f"{len(errors)} cases, worst {worst} {errors[worst]:.2e} (< 1e-3), {elapsed:.0f}s (< 300s)")
    assert errors[worst] < 1e-3
    assert elapsed < 300


# -- 5 ----------------------------------------------------------------------------------

def test_criterion_05_schedule_laws(detail):
    t0 = time.perf_counter()
    sched = make_schedule(1000)
    betas = np.linspace(1e-4, 0.02, 1000)
    oracle, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        oracle.append(acc)
    ab_err = float(np.max(np.abs(np.array([sched.alpha_bar(t) for t in range(1, 1001)]) - oracle)))
    worst_var = 0.0
    x0 = np.full((10_000, 1), 0.5)
    rng = np.random.default_rng(5)
    for t in (1, 10, 250, 500, 1000):
        xt = forward_diffuse(x0, t, rng.standard_normal(x0.shape), sched).data
        worst_var = max(worst_var, abs(xt.var() / (1 - sched.alpha_bar(t)) - 1))
    elapsed = time.perf_counter() - t0
    detail.append(f"alpha_bar err {ab_err:.1e} (< 1e-7), variance dev {worst_var:.1%} (< 5%), {elapsed:.1f}s")
    assert ab_err < 1e-7
    assert worst_var < 0.05
    assert elapsed < 60


# -- 6 ----------------------------------------------------------------------------------

def test_criterion_06_oracle_ddim_inversion(detail):
    t0 = time.perf_counter()
    sched = TOY.schedule()
    rng = np.random.default_rng(6)
    x0 = rng.uniform(-1, 1, (4, 3, 32, 32))

    def oracle(xt, t, _args):
        ab = sched.alpha_bar(t).reshape(-1, 1, 1, 1)
        return Tensor((xt.data - np.sqrt(ab) * x0) / np.sqrt(1 - ab))
    xT = forward_diffuse(x0, sched.T, rng.standard_normal(x0.shape), sched).data
    out = ddim_sample(oracle, sched, sched.T, x0.shape, 0, x_start=xT).data
    err = float(np.abs(out - x0).max())
    elapsed = time.perf_counter() - t0
    detail.append(f"max abs err {err:.2e} (< 1e-4), {elapsed:.1f}s (< 30s)")
    assert err < 1e-4
    assert elapsed < 30


# -- 7 ----------------------------------------------------------------------------------

def test_criterion_07_frozen_isolation(detail):
    t0 = time.perf_counter()
    cfg = copy.deepcopy(TOY)
    sys_ = live_system("wca")
    ds = D.make_dataset(200, 0, 32)
    x, c, lab = D.stack(ds.train)
    before = {k: v.copy() for k, v in sys_.base.params.snapshot().items()}
    ctl_before = sys_.state.params.snapshot()
    losses = train_denoiser(sys_.base, sys_.variant, sys_.state, TrainData(x, c, lab), sys_.sched, 100, 8,
                            cfg.training.lr, 0)
    after = sys_.base.params.snapshot()
    frozen_same = all(before[k].tobytes() == after[k].tobytes() for k in before)
    moved = sum(not np.array_equal(ctl_before[k], v) for k, v in sys_.state.params.snapshot().items())
    elapsed = time.perf_counter() - t0
    detail.append(f"{len(before)} frozen tensors unchanged={frozen_same}, {moved} adapter tensors moved, "
                 f"{len(losses)} steps, {elapsed:.0f}s (< 300s)")
    assert frozen_same
    assert moved > 0
    assert elapsed < 300


# -- 8 and 9 ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def efficacy():
    """The toy training run: base pretraining, then WCA ws=4 for 2000 steps at batch 8, seed 0."""
    cfg = copy.deepcopy(TOY)
    assert (cfg.control.variant, cfg.control.window_sizes, cfg.dataset.size) == ("wca", 4, 32)
    assert (cfg.diffusion.T, cfg.training.batch, cfg.train_steps, cfg.training.seed) == (200, 8, 2000, 0)
    ds = D.make_dataset(cfg.dataset.n, cfg.dataset.base_seed, cfg.dataset.size)
    x, c, lab = D.stack(ds.train)
    t0 = time.perf_counter()
    base_done = {}

    def on_base_done(_sys, _losses):
        base_done["t"] = time.perf_counter() - t0
    sys_, losses, base_losses = pipeline.train_system(cfg, x, c, lab, on_base_done=on_base_done)
    return {"cfg": cfg, "system": sys_, "losses": np.array(losses), "base_losses": np.array(base_losses),
            "train_s": time.perf_counter() - t0, "base_s": base_done.get("t", 0.0)}


def test_criterion_08_training_efficacy(detail, efficacy):
    L = efficacy["losses"]
    first, last = float(L[:100].mean()), float(L[-100:].mean())
    ratio = last / first
    detail.append(f"first-100 {first:.4f}, final-100 {last:.4f}, ratio {ratio:.3f} (< 0.5); "
                 f"base phase {efficacy['base_s']:.0f}s, total {efficacy['train_s']:.0f}s (< 1800s)")
    assert len(L) == 2000
    assert ratio < 0.5
    assert efficacy["train_s"] < 1800


def test_criterion_09_alignment_ordering(detail, efficacy):
    t0 = time.perf_counter()
    cfg, sys_ = efficacy["cfg"], efficacy["system"]
    tiles = pipeline.eval_tiles(cfg)[:64]
    assert len(tiles) == 64
    _, c, lab = D.stack(tiles)
    seed = cfg.sampling.seed
    base_sys = pipeline.System(cfg, sys_.base, ControlVariant("none"), None, sys_.codec, 0)
    wca_imgs = sys_.sample(c, lab, seed)
    base_imgs = base_sys.sample(c, lab, seed)
    wca_iou, _ = mean_alignment(wca_imgs, [t.tile for t in tiles])
    base_iou, _ = mean_alignment(base_imgs, [t.tile for t in tiles])
    elapsed = time.perf_counter() - t0
    detail.append(f"IoU wca {wca_iou:.3f} vs base {base_iou:.3f}, margin {wca_iou - base_iou:+.3f} (>= 0.15), "
                 f"{elapsed:.0f}s (< 1200s)")
    assert wca_iou - base_iou >= 0.15
    assert elapsed < 1200


# -- 10 ---------------------------------------------------------------------------------

def test_criterion_10_fid_sanity(detail):
    t0 = time.perf_counter()
    g = GaussianFit(np.arange(5.0), np.diag([1.0, 2.0, 3.0, 4.0, 5.0]) + 0.1)
    ident = frechet_distance(g, g)
    delta = np.array([1.0, -1.0, 2.0, 0.0, 0.5])
    shifted = frechet_distance(g, GaussianFit(g.mean + delta, g.cov))
    ds = D.make_dataset(900, 0, 32)
    x, _, lab = D.stack(ds.samples)
    ex = train_feature_extractor(x[:500], lab[:500], epochs=5, seed=0)
    a, b = x[500:700], x[700:900]
    noise = np.random.default_rng(10).uniform(-1, 1, a.shape).astype(np.float32)
    real_real, real_noise = fid(ex, a, b), fid(ex, a, noise)
    elapsed = time.perf_counter() - t0
    detail.append(f"identity {ident:.1e}, shift err {abs(shifted - delta @ delta):.1e}, "
                 f"fid(A,B) {real_real:.3f} < fid(A,noise) {real_noise:.3f}, {elapsed:.0f}s (< 600s)")
    assert abs(ident) <= 1e-4
    assert abs(shifted - delta @ delta) <= 1e-4
    assert real_real < real_noise
    assert elapsed < 600


# -- 11 ---------------------------------------------------------------------------------

def test_criterion_11_efficiency_accounting(detail, tmp_path):
    t0 = time.perf_counter()
    net = reference_network()
    hand = [2 * 8 * 3 * 3 * 3 * 16 * 16, 8 * 16 * 16, 2 * 1 * 8 * 1 * 1 * 16 * 16]
    assert [layer_flops(L) for L in net] == hand
    assert count_flops(net) == sum(hand)
    linear = all(count_flops(net, b) == b * count_flops(net) for b in (1, 2, 4, 8))
    cfg = copy.deepcopy(TOY)
    cfg.eval.variants = ["none", "wca", "smartcontrol", "controlnet"]
    cfg.eval.bench_repeats = 3
    rows = pipeline.run_bench(cfg, out_dir=tmp_path)
    table = {r["method"].split("_")[0]: r for r in rows}
    wca, cn = table["wca"]["params_trainable"], table["controlnet"]["params_trainable"]
    wca_layers = adapter_layers(ControlVariant("wca", 4), cfg.unet_config(), 32, 32)
    lin_model = all(count_flops(wca_layers, b) == b * count_flops(wca_layers) for b in (1, 4))
    elapsed = time.perf_counter() - t0
    detail.append(f"reference net {count_flops(net)} FLOPs, trainable wca {wca} < controlnet {cn}, "
                 f"linear in batch {linear and lin_model}, {elapsed:.0f}s (< 300s)")
    assert (tmp_path / "bench.csv").exists()
    assert wca < cn
    assert linear and lin_model
    assert elapsed < 300


# -- 12 ---------------------------------------------------------------------------------

def test_criterion_12_reproducibility(detail, tmp_path):
    t0 = time.perf_counter()
    cfg = copy.deepcopy(TOY)
    cfg.dataset.n = 40
    cfg.training.steps, cfg.training.base_steps = 2, 2
    cfg.sampling.count, cfg.sampling.ddim_steps = 2, 5
    out = tmp_path / "run"
    runs = []
    for _ in range(2):
        res = pipeline.run_train(cfg, out_dir=out)
        files = {n: (out / n).read_bytes() for n in ("model.wcad", "base.wcad", "loss.csv", "base_loss.csv")}
        index = pipeline.run_sample(cfg, res.checkpoint, out_dir=out / "samples")
        files.update({p.name: p.read_bytes() for p in sorted(index.parent.iterdir())})
        runs.append(files)
    identical = runs[0] == runs[1]
    header, _ = read_checkpoint(out / "model.wcad")
    store, conf, step = load_checkpoint(out / "model.wcad")
    save_checkpoint(store, conf, step, tmp_path / "copy.wcad", rng_state=header["rng_state"],
                    extra=header.get("extra"))
    roundtrip = (tmp_path / "copy.wcad").read_bytes() == (out / "model.wcad").read_bytes()
    elapsed = time.perf_counter() - t0
    detail.append(f"{len(runs[0])} files identical={identical}, checkpoint round trip bitwise={roundtrip}, "
                 f"{elapsed:.0f}s (< 300s)")
    assert identical
    assert roundtrip
    assert elapsed < 300
