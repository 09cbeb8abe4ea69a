"""Acceptance gate: the eleven release criteria, one test (and one PASS/FAIL
line) each.

Criteria 4, 6, 7, and 10 run real training and dominate the runtime (the
whole module takes roughly half an hour on one CPU core); the 2000-step
residual-contrastive pre-training run is shared between criteria via
module-scoped fixtures. Run the unit suites alone for a fast signal.

Runtime budgets are stated as CPU time, so they are measured with
``time.process_time`` -- wall clock on a shared host also counts time this
process never ran.
"""

import hashlib
import itertools
import math
import sys
import time

import numpy as np
import pytest

from rcl_lab.autodiff import Tensor, conv2d, grad_check
from rcl_lab.cli import main as cli_main
from rcl_lab.evaluate import (
    density_analysis,
    evaluate_params,
    psnr,
    ssim,
    task_pair,
)
from rcl_lab.losses import (
    DistanceSpec,
    Residual,
    bd,
    consistency_loss,
    contrastive_loss,
    emd,
    jdd_consistency_loss,
    mmd,
    n2s_mask,
    residual,
    total_loss,
)
from rcl_lab.models import (
    FeatureEncoder,
    build_net,
    load_checkpoint,
    save_checkpoint,
)
from rcl_lab.noise import (
    DEFAULT_NOISE_RANGE,
    NoiseParams,
    NoiseRange,
    apply_nlf_noise,
    demosaic_bilinear,
    gen_procedural_image,
    mosaic,
    sample_nlf_params,
)
from rcl_lab.train import (
    Dataset,
    TrainConfig,
    build_batch,
    finetune,
    pretrain,
    rcl_step,
    train_supervised,
)


# Criterion lines collected here are echoed after the run by the
# pytest_terminal_summary hook in conftest.py; printing from inside a
# passing test would be swallowed by capture.
REPORT_LINES: list[str] = []


def report(number: int, name: str, ok: bool, detail: str = "") -> None:
    """One pass/fail line per criterion."""
    status = "PASS" if ok else "FAIL"
    extra = f" ({detail})" if detail else ""
    line = f"criterion {number:2d} [{name}]: {status}{extra}"
    REPORT_LINES.append(line)
    print(line, file=sys.__stdout__, flush=True)


# -- shared long-running artifacts -------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    """The desk corpus: 64 procedural 64x64 images, default noise range."""
    return Dataset.synthesize(64, 64, DEFAULT_NOISE_RANGE, seed=0)


@pytest.fixture(scope="module")
def rcl_run(corpus):
    """2000-step RCL-EMD pre-training; shared by criteria 4 and 7."""
    cfg = TrainConfig(seed=0, steps=2000)
    t0 = time.process_time()
    params, losses = pretrain(corpus, cfg)
    return params, losses, time.process_time() - t0


# -- criterion 1: gradient suite ---------------------------------------------


def test_criterion_01_gradient_suite():
    """Every op and the full training-loss graph pass fd checks < 1e-4."""
    t0 = time.process_time()
    rng = np.random.default_rng(0)
    failures = []

    def check(name, build, leaves, **kw):
        rep = grad_check(build, leaves, step=1e-5, tolerance=1e-4, **kw)
        if not rep.passed:
            failures.append((name, rep.failures[:3]))

    v = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    check("add/sub/mul/scale", lambda t: (
        (t["a"] + t["b"]) * (t["a"] - t["b"]).scale(0.5)).sum(),
        {"a": v, "b": w})
    check("mean/sum-axis", lambda t: t["a"].mean(axis=0).sum()
          + t["a"].sum(axis=1).mean(), {"a": v})
    check("abs", lambda t: t["a"].abs().sum(), {"a": v})
    check("square", lambda t: t["a"].square().mean(), {"a": v})
    check("relu", lambda t: t["a"].relu().sum(), {"a": v})
    check("exp/log", lambda t: (t["a"].square() + Tensor(0.1)).log().exp().sum(),
          {"a": v})
    check("sort", lambda t: (t["a"].sort() * Tensor(np.arange(12.0))).sum(),
          {"a": rng.normal(size=12)})
    check("logsumexp", lambda t: t["a"].logsumexp(), {"a": rng.normal(size=9)})
    check("conv2d", lambda t: conv2d(t["x"], t["w"], t["b"]).square().mean(),
          {"x": rng.normal(size=(1, 4, 4, 2)),
           "w": rng.normal(size=(3, 3, 2, 3)), "b": rng.normal(size=3)})
    check("pool/upsample", lambda t: t["x"].avg_pool2x().upsample2x()
          .square().sum(), {"x": rng.normal(size=(1, 4, 4, 2))})
    check("concat/slice/reshape", lambda t: Tensor.concat(
        [t["a"].reshape((12,)), t["b"].reshape((12,))], axis=0)[4:20]
        .square().sum(), {"a": v, "b": w})

    # Full training objective on a micro-batch: contrast + consistency.
    enc = FeatureEncoder(0)
    net = build_net("unet-small", 3, 3, seed=0)
    crops = np.stack([gen_procedural_image(s, 16, 16) for s in range(4)])
    spec = DistanceSpec("emd")

    def full_loss(t):
        x = t["x"]
        out = net.forward(x)
        res = [residual(x[i:i + 1], out[i:i + 1], "direct")
               for i in range(4)]
        contrast = contrastive_loss(res[0], res[1], res[2:], spec, tau=0.5)
        cons = consistency_loss(x, out, enc)
        return total_loss(contrast, cons, alpha=1e-3)

    check("full-loss-graph", full_loss, {"x": crops}, max_elements=24,
          rng=np.random.default_rng(1))

    elapsed = time.process_time() - t0
    ok = not failures and elapsed < 60
    report(1, "gradient suite", ok, f"{elapsed:.1f}s, failures={failures}")
    assert ok, failures


# -- criterion 2: distance oracles -------------------------------------------


def test_criterion_02_distance_oracles():
    t0 = time.process_time()
    rng = np.random.default_rng(2)
    perms = {n: np.array(list(itertools.permutations(range(n))))
             for n in range(2, 9)}
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        a, b = rng.normal(size=n), rng.normal(size=n)
        best = np.abs(a[None, :] - b[perms[n]]).mean(axis=1).min()
        worst = max(worst, abs(float(emd(a, b).data) - best))
    emd_ok = worst < 1e-9

    bd1 = abs(float(bd([-1.0, 1.0], [1.0, 3.0]).data) - 0.5)
    bd2 = abs(float(bd([-1.0, 1.0], [-2.0, 2.0]).data) - 0.25 * math.log(1.5625))
    bd_ok = bd1 < 1e-9 and bd2 < 1e-9

    neg = 0
    for _ in range(1000):
        x, y = rng.normal(size=24), rng.normal(size=24)
        if float(mmd(x, y).data) < -1e-12:
            neg += 1
    split = 0
    for _ in range(100):
        a = rng.normal(size=48)
        near = rng.normal(size=48)
        far = rng.normal(size=48) + 3.0
        if float(mmd(a, far).data) > float(mmd(a, near).data):
            split += 1
    mmd_ok = neg == 0 and split >= 99

    elapsed = time.process_time() - t0
    ok = emd_ok and bd_ok and mmd_ok and elapsed < 60
    report(2, "distance oracles", ok,
           f"emd worst {worst:.2e}, bd gaps {bd1:.2e}/{bd2:.2e}, "
           f"mmd neg {neg}, split {split}/100, {elapsed:.1f}s")
    assert ok


# -- criterion 3: noise-model fidelity ---------------------------------------


def test_criterion_03_noise_model():
    t0 = time.process_time()
    p = NoiseParams(0.004, 0.0015)
    rng = np.random.default_rng(3)
    rel_errs = []
    for y in (0.1, 0.5, 1.0):
        noisy = apply_nlf_noise(np.full(100_000, y), p, rng)
        emp = np.var(noisy - y)
        rel_errs.append(abs(emp - p.variance(y)) / p.variance(y))
    var_ok = max(rel_errs) < 0.05

    s = 0.05
    dp = sample_nlf_params(NoiseRange(s, s), np.random.default_rng(4))
    exact_ok = dp.lambda_shot == s * s / 2 and dp.lambda_read == s * s / 2

    elapsed = time.process_time() - t0
    ok = var_ok and exact_ok and elapsed < 30
    report(3, "noise-model fidelity", ok,
           f"max rel var err {max(rel_errs):.4f}, degenerate exact={exact_ok}, "
           f"{elapsed:.1f}s")
    assert ok


# -- criterion 4: density direction ------------------------------------------


def test_criterion_04_density_direction(corpus, rcl_run):
    params, losses, train_time = rcl_run
    t0 = time.process_time()
    true_rec = density_analysis(None, corpus, 500, np.random.default_rng(100),
                                "true-noise", crop=32)
    mass_ok = true_rec.positive_fraction > 0.70

    init = build_net("unet-small", 3, 3, "identity", seed=0)
    pre = density_analysis(init.params, corpus, 200,
                           np.random.default_rng(101), "pre-training", crop=32)
    post = density_analysis(params, corpus, 200,
                            np.random.default_rng(101), "post-training", crop=32)
    gap_init = float(np.mean(pre.values))
    gap_post = float(np.mean(post.values))
    direction_ok = gap_post > gap_init

    elapsed = train_time + (time.process_time() - t0)
    ok = mass_ok and direction_ok and elapsed < 15 * 60
    report(4, "density direction", ok,
           f"true mass {true_rec.positive_fraction:.3f}, "
           f"gap {gap_init:.4f}->{gap_post:.4f}, "
           f"loss {losses[0]:.3f}->{losses[-1]:.3f}, {elapsed / 60:.1f} min")
    assert ok


# -- criterion 5: Algorithm-1 accounting -------------------------------------


def test_criterion_05_step_accounting(corpus):
    results = {}
    for n_plus_1 in (4, 8):
        cfg = TrainConfig(seed=0, batch_size=n_plus_1, steps=1)
        net = build_net(cfg.arch, 3, 3, seed=0)
        batch = build_batch(corpus, cfg, np.random.default_rng(5))
        _, _, counts = rcl_step(batch, net, FeatureEncoder(0), cfg)
        results[n_plus_1] = counts
    ok = all(
        results[m]["distance_evals"] == m * m
        and results[m]["net_forwards"] == 2 * m
        for m in (4, 8)
    )
    report(5, "algorithm-1 accounting", ok, f"{results}")
    assert ok, results


# -- criterion 6: baseline sanity --------------------------------------------


def test_criterion_06_baselines(corpus):
    t0 = time.process_time()
    train = Dataset(corpus.entries[:56], corpus.noise_range)
    test = Dataset(corpus.entries[56:], corpus.noise_range)
    params, _ = pretrain(train, TrainConfig(seed=0, steps=2000, mode="n2n"))
    denoised, _ = evaluate_params(params, test, "denoise")
    noisy = [psnr(e.noisy, e.clean) for e in test.entries]
    margin = float(np.mean(denoised) - np.mean(noisy))
    psnr_ok = margin >= 1.0

    total = np.zeros((32, 32), dtype=int)
    for phase in range(4):
        total += n2s_mask(32, 32, phase).astype(int)
    mask_ok = (total == 1).all()

    elapsed = time.process_time() - t0
    ok = psnr_ok and mask_ok and elapsed < 10 * 60
    report(6, "baseline sanity", ok,
           f"n2n margin {margin:+.2f} dB, masks partition={mask_ok}, "
           f"{elapsed / 60:.1f} min")
    assert ok


# -- criterion 7: label-efficiency direction ---------------------------------


def test_criterion_07_table3_direction(corpus, rcl_run):
    params, _, _ = rcl_run
    t0 = time.process_time()
    train = Dataset(corpus.entries[:56], corpus.noise_range)
    test = Dataset(corpus.entries[56:], corpus.noise_range)
    wins, margins = 0, []
    for trial in range(5):
        cfg = TrainConfig(seed=trial, steps=1, finetune_steps=300)
        pool = [task_pair(e, "denoise") for e in train.entries]
        order = np.random.default_rng([cfg.seed, 13]).permutation(len(pool))
        subset = [pool[i] for i in order[:4]]
        tuned = finetune(params, subset, cfg, freeze_all_but_last=False)
        rcl_psnr, _ = evaluate_params(tuned, test, "denoise")
        scratch = train_supervised(subset, cfg)
        sl_psnr, _ = evaluate_params(scratch, test, "denoise")
        margin = float(np.mean(rcl_psnr) - np.mean(sl_psnr))
        margins.append(margin)
        wins += margin >= 0
    elapsed = time.process_time() - t0
    ok = wins >= 4 and elapsed < 20 * 60
    report(7, "table-3 direction", ok,
           f"wins {wins}/5, margins "
           + "/".join(f"{m:+.2f}" for m in margins)
           + f" dB, {elapsed / 60:.1f} min")
    assert ok


# -- criterion 8: proxy-protocol integrity -----------------------------------


def test_criterion_08_proxy_integrity(corpus):
    cfg = TrainConfig(seed=0, steps=1, batch_size=4, crop=16, finetune_steps=3)
    params, _ = pretrain(Dataset(corpus.entries[:8]), cfg)
    labeled = [(e.noisy, e.clean) for e in corpus.entries[:2]]
    tuned = finetune(params, labeled, cfg, freeze_all_but_last=True)
    frozen_ok = all(
        np.array_equal(tuned[n].data, params[n].data)
        for n in params.names() if not n.startswith("head.")
    )
    head_changed = any(
        not np.array_equal(tuned[n].data, params[n].data)
        for n in params.names() if n.startswith("head.")
    )
    # Replacing the head (here for the upsampling task) must touch head
    # tensors only.
    up = [(e.noisy, np.repeat(np.repeat(e.clean, 2, 0), 2, 1))
          for e in corpus.entries[:2]]
    ucfg = TrainConfig(seed=0, steps=1, batch_size=4, crop=16,
                       finetune_steps=3, head="upsample-2x")
    utuned = finetune(params, up, ucfg, freeze_all_but_last=True)
    replaced_ok = all(
        np.array_equal(utuned[n].data, params[n].data)
        for n in params.names() if not n.startswith("head.")
    ) and utuned["head.w"].data.shape != params["head.w"].data.shape
    ok = frozen_ok and head_changed and replaced_ok
    report(8, "proxy integrity", ok,
           f"non-head bit-identical={frozen_ok}, head changed={head_changed}, "
           f"replacement touches head only={replaced_ok}")
    assert ok


# -- criterion 9: metric correctness -----------------------------------------


def test_criterion_09_metrics(tmp_path):
    x = gen_procedural_image(9, 32, 32)
    inf_ok = psnr(x, x.copy()) == math.inf
    ten = psnr(np.zeros((8, 8)), np.full((8, 8), math.sqrt(0.1)))
    ten_ok = abs(ten - 10.0) < 1e-12
    ssim_ok = abs(ssim(x, x.copy()) - 1.0) < 1e-12

    net = build_net("unet-small", 3, 3, seed=9)
    save_checkpoint(net.params, tmp_path / "m.rcl")
    loaded = load_checkpoint(tmp_path / "m.rcl")
    ckpt_ok = all(
        loaded[n].data.tobytes() == net.params[n].data.tobytes()
        for n in net.params.names()
    )
    ok = inf_ok and ten_ok and ssim_ok and ckpt_ok
    report(9, "metric correctness", ok,
           f"psnr inf={inf_ok}, 10dB={ten_ok}, ssim1={ssim_ok}, "
           f"roundtrip={ckpt_ok}")
    assert ok


# -- criterion 10: determinism -----------------------------------------------


def test_criterion_10_determinism(tmp_path):
    t0 = time.process_time()
    sim = tmp_path / "sim.cfg"
    sim.write_text("seed = 11\nimages = 12\nimage_size = 32\n")
    assert cli_main(["simulate", "--config", str(sim),
                     "--out", str(tmp_path / "data")]) == 0
    pre = tmp_path / "pre.cfg"
    pre.write_text(
        f"seed = 11\ndataset = {tmp_path / 'data' / 'dataset'}\n"
        "steps = 25\nbatch_size = 4\ncrop = 16\n")
    digests = []
    for run in ("r1", "r2"):
        assert cli_main(["pretrain", "--config", str(pre),
                         "--out", str(tmp_path / run)]) == 0
        ck = hashlib.sha256((tmp_path / run / "checkpoint.rcl").read_bytes())
        ls = hashlib.sha256((tmp_path / run / "loss.csv").read_bytes())
        digests.append((ck.hexdigest(), ls.hexdigest()))
    elapsed = time.process_time() - t0
    ok = digests[0] == digests[1] and elapsed < 30 * 60
    report(10, "determinism", ok,
           f"checkpoint+loss hashes equal={digests[0] == digests[1]}, "
           f"{elapsed:.1f}s")
    assert ok, digests


# -- criterion 11: mosaic pipeline -------------------------------------------


def test_criterion_11_mosaic_pipeline():
    rgb = gen_procedural_image(11, 32, 32)
    raw = mosaic(rgb)
    rec = demosaic_bilinear(raw)
    pass_ok = np.array_equal(mosaic(rec), raw)
    jdd = float(jdd_consistency_loss(Tensor(raw), Tensor(rec)).data)
    jdd_ok = jdd == 0.0
    r = residual(Tensor(raw[None, :, :, None]), Tensor(rec[None]), "mosaic")
    shape_ok = r.samples.data.shape == (raw.size,)
    zero_ok = np.allclose(r.samples.data, 0.0, atol=1e-15)
    ok = pass_ok and jdd_ok and shape_ok and zero_ok
    report(11, "mosaic pipeline", ok,
           f"pass-through={pass_ok}, jdd loss={jdd}, "
           f"residual shape={r.samples.data.shape}")
    assert ok
