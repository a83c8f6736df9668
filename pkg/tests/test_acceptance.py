"""Acceptance criteria 1-11, one test each.

Every test records a PASS/FAIL line with the measured value against the stated
tolerance; the lines are printed as they happen and again in the terminal
summary. The overfit checkpoint is trained once per session and cached under
the pytest cache directory, keyed by the recipe and the package sources.
"""

import hashlib
import itertools
import json
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

import mrt
from mrt.canvas import clip_design, compose, group_layers, over, validate_design, visible_crop
from mrt.codec import decode, encode
from mrt.costmodel import bench_efficiency
from mrt.distill import (Batch, DistillConfig, distill, distill_fields, dmd_student_gradient,
                        energy_distance, sample_mixture, student_generate, toy_batch_maker,
                        toy_sample, train_toy_teacher)
from mrt.evaluate import evaluate_i2l
from mrt.model import MRTModel, ModelConfig, collate
from mrt.packing import (BACKGROUND, COMPOSED, Role, TaskSpec, condition_targets, fg_region,
                         mask_plan, pack_design)
from mrt.sampler import SampleConfig, euler_integrate, euler_sample_many
from mrt.synth import GenParams, gen_design, sample_seed
from mrt.train import (build_task, load_checkpoint, masked_flow_loss,
                       save_checkpoint, train)

from clihelp import run_all, tree_bytes, write_config
from conftest import rand_design, rand_premul
from test_model import gradient_check

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def record(request, n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    request.config._mrt_acceptance.append((n, line))
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line, flush=True)
    assert ok, line


# -- 1. compositing algebra ---------------------------------------------------------

def test_criterion_01_compositing(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    cases, worst = 0, 0.0
    for _ in range(1000):
        h, w = (int(x) for x in rng.integers(1, 6, 2))
        a, b, c = (rand_premul(rng, h, w) for _ in range(3))
        zero = np.zeros_like(a)
        worst = max(worst, np.abs(over(over(a, b), c) - over(a, over(b, c))).max(),
                    np.abs(over(zero, a) - a).max(), np.abs(over(a, zero) - a).max())
        out = over(a, b)
        worst = max(worst, (out[..., :3] - out[..., 3:4]).max(), out[..., 3].max() - 1.0)
        cases += 1
    for _ in range(1000):
        d = rand_design(rng, canvas=8, k=4)
        start = int(rng.integers(1, 5))
        size = int(rng.integers(1, 6 - start))
        g = group_layers(d, range(start, start + size))
        validate_design(g)
        worst = max(worst, np.abs(compose(g) - compose(d)).max())
        worst = max(worst, np.abs(visible_crop(compose(d), d.bg_rect)
                                  - compose(clip_design(d, d.bg_rect))).max())
        cases += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and cases >= 1000 and dt < 10
    record(request, 1, ok, f"{cases} cases, max error {worst:.2e} (<= 1e-6), {dt:.1f}s (< 10s)")


# -- 2. codec exactness ------------------------------------------------------------------

def test_criterion_02_codec(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    exact = linear = True
    for _ in range(1000):
        h, w = 8 * int(rng.integers(1, 5)), 8 * int(rng.integers(1, 5))
        x, y = rand_premul(rng, h, w), rand_premul(rng, h, w)
        a, b = rng.standard_normal(2)
        exact &= np.array_equal(decode(encode(x)), x)
        g = encode(x)
        exact &= np.array_equal(encode(decode(g)), g)
        linear &= np.allclose(encode(a * x + b * y), a * encode(x) + b * encode(y),
                              atol=1e-12, rtol=0)
    dt = time.perf_counter() - t0
    ok = exact and linear and dt < 5
    record(request, 2, ok, f"1000 images: round trip bit-exact={exact}, linear={linear}, "
                           f"{dt:.1f}s (< 5s)")


# -- 3. mask plans -----------------------------------------------------------------------

def test_criterion_03_mask_plans(request):
    t0 = time.perf_counter()
    checked, bad = 0, []
    for k in range(1, 9):
        fg = {fg_region(i) for i in range(1, k + 1)}
        for kind in ("t2l", "i2l", "l2l-add", "l2l-restyle"):
            subsets = [()] if kind in ("t2l", "i2l") else [
                s for n in range(1, k + 1) for s in itertools.combinations(range(1, k + 1), n)]
            for targets in subsets:
                conds = {i: np.zeros((1, 1, 4)) for i in targets} if kind == "l2l-restyle" else {}
                task = TaskSpec(kind, targets, conds)
                plan = mask_plan(task, k)
                by = {r: {g for g, v in plan.items() if v == r} for r in Role}
                tg = {fg_region(i) for i in targets}
                if kind == "t2l":
                    want = {Role.NOISED: {COMPOSED, BACKGROUND} | fg, Role.MASKED: set(),
                            Role.CONDITION: set()}
                elif kind == "i2l":
                    want = {Role.NOISED: {BACKGROUND} | fg, Role.MASKED: {COMPOSED},
                            Role.CONDITION: set()}
                else:
                    n_cond = len(targets) if kind == "l2l-restyle" else 0
                    want = {Role.NOISED: tg, Role.MASKED: {COMPOSED, BACKGROUND} | (fg - tg),
                            Role.CONDITION: set(range(k + 2, k + 2 + n_cond))}
                if by != want:
                    bad.append((kind, k, targets))
                checked += 1
    # position copy on real packed sequences
    rng = np.random.default_rng(303)
    copies = 0
    for k in range(1, 9):
        d = gen_design(sample_seed(303, k), GenParams(layers=(k, k), bg_size=(16, 32)))
        task = build_task(d, "l2l-restyle", rng)
        seq = pack_design(d, task)
        for cid, target in condition_targets(task, k).items():
            if Counter(map(tuple, seq.pos[seq.region == cid])) != \
                    Counter(map(tuple, seq.pos[seq.region == target])):
                bad.append(("position-copy", k, cid))
            copies += 1
    dt = time.perf_counter() - t0
    ok = not bad and dt < 5
    record(request, 3, ok, f"{checked} plans + {copies} position copies, {len(bad)} mismatches, "
                           f"{dt:.1f}s (< 5s)")


# -- 4. gradient fidelity ----------------------------------------------------------------

def test_criterion_04_gradient(request):
    t0 = time.perf_counter()
    g = gradient_check(64, seed=0)
    analytic, numeric = g[:, 0], g[:, 1]
    floor = 1e-4 * np.abs(analytic).max()
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                                                  floor)
    dt = time.perf_counter() - t0
    ok = rel.max() <= 1e-3 and dt < 60
    record(request, 4, ok, f"64 params fp64, max rel error {rel.max():.2e} (<= 1e-3), "
                           f"{dt:.1f}s (< 60s)")


# -- 5. masked-loss isolation ---------------------------------------------------------

def test_criterion_05_masked_loss(request):
    rng = np.random.default_rng(505)
    model = MRTModel(ModelConfig(dim=32, depth=1, heads=2, vocab=64)).double()
    worst, n = 0.0, 0
    for trial in range(40):
        d = gen_design(sample_seed(505, trial), GenParams(layers=(1, 5), bg_size=(16, 24)))
        kind = ("t2l", "i2l", "l2l-add", "l2l-restyle")[trial % 4]
        seq = pack_design(d, build_task(d, kind, rng))
        b = collate([seq], 64, torch.float64)
        pred = model(b.tokens, torch.tensor([0.5], dtype=torch.float64), b)
        target = torch.as_tensor(rng.standard_normal(tuple(pred.shape)))
        base = masked_flow_loss(pred, target, b.noised).item()
        other = ~b.noised[0]
        if not other.any():
            continue
        pert = pred.detach().clone()
        pert[0, other] = torch.as_tensor(rng.standard_normal((int(other.sum()), 256))) * 1e3
        worst = max(worst, abs(masked_flow_loss(pert, target, b.noised).item() - base))
        n += 1
    record(request, 5, worst == 0.0, f"{n} perturbed sequences, max loss change {worst!r} (== 0)")


# -- 6. pinning ----------------------------------------------------------------------------

def test_criterion_06_pinning(request):
    kinds = ("t2l", "i2l", "l2l-add", "l2l-restyle")
    bad, trials = 0, 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        cfg = ModelConfig(dim=32, depth=1, heads=2, vocab=64, seed=trial)
        model = MRTModel(cfg)
        d = gen_design(sample_seed(606, trial), GenParams(layers=(1, 5), bg_size=(16, 24)))
        seq = pack_design(d, build_task(d, kinds[trial % 4], rng))
        keep = ~seq.noised
        out = euler_sample_many(model, [seq], SampleConfig(steps=3, seed=trial))[0]
        bad += not np.array_equal(out.tokens[keep], seq.tokens[keep])
        b = collate([seq], 64)
        noise = torch.as_tensor(rng.standard_normal(tuple(b.tokens.shape)), dtype=torch.float32)
        x = student_generate(model, Batch(b, b.tokens, b.noised), noise, 2)
        bad += not torch.equal(x[0][~b.noised[0]], b.tokens[0][~b.noised[0]])
        trials += 2
    record(request, 6, bad == 0, f"{trials} rollouts (sampler + student) over 4 tasks, "
                                 f"{bad} with altered masked tokens (== 0)")


# -- 7. overfit reconstruction ----------------------------------------------------------------

OVERFIT_BINS = ((4, 7, 6), (8, 15, 5), (16, 31, 5))  # (min layers, max layers, designs)
OVERFIT_BG = (32, 32)


def overfit_designs(seed: int = 0):
    out = []
    for j, (lo, hi, n) in enumerate(OVERFIT_BINS):
        p = GenParams(layers=(lo, hi), bg_size=OVERFIT_BG)
        out += [gen_design(sample_seed(seed * 100 + j, i), p) for i in range(n)]
    return out


def load_recipe():
    from mrt.config import load_config
    return load_config(CONFIG_DIR / "overfit.yaml")


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(mrt.__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    h.update((CONFIG_DIR / "overfit.yaml").read_bytes())
    h.update(repr((OVERFIT_BINS, OVERFIT_BG)).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def overfit(request):
    """(checkpoint, designs, wall seconds) for the overfit recipe, trained once."""
    cfg = load_recipe()
    designs = overfit_designs()
    cache = Path(request.config.cache.mkdir("mrt-overfit"))
    path = cache / f"overfit-{_source_digest()}.ckpt"
    meta = path.with_suffix(".json")
    if path.exists() and meta.exists():
        return load_checkpoint(path), designs, json.loads(meta.read_text())
    t0 = time.perf_counter()
    losses = []
    ck = train(cfg.model, cfg.train, designs, callback=lambda s, k, l: losses.append(l))
    info = {"seconds": time.perf_counter() - t0, "steps": ck.step, "losses": losses}
    save_checkpoint(ck, path)
    meta.write_text(json.dumps(info))
    return load_checkpoint(path), designs, info


@pytest.fixture(scope="session")
def overfit_report(overfit):
    ck, designs, _ = overfit
    model = ck.build_model()
    model.eval()
    cfg = load_recipe()
    return evaluate_i2l(model, designs, SampleConfig(steps=50, seed=cfg.sample.seed))


def test_criterion_07_overfit(request, overfit, overfit_report):
    ck, designs, info = overfit
    r = overfit_report
    order = [r.bins[b]["psnr_merged"] for b in ("[4,8)", "[8,16)", "[16,32)")]
    monotone = all(a > b for a, b in zip(order, order[1:]))
    n_params = sum(v.numel() for v in ck.params.values())
    ok = (r.psnr_merged >= 30.0 and r.psnr_layer >= 25.0 and monotone and ck.step <= 5000
          and 2e6 <= n_params <= 5e6)
    bins = " > ".join(f"{v:.2f}" for v in order)
    record(request, 7, ok,
           f"{len(designs)} designs, {n_params / 1e6:.2f}M params, {ck.step} steps "
           f"({info['seconds'] / 60:.1f} min): merged {r.psnr_merged:.2f} dB (>= 30), "
           f"layer {r.psnr_layer:.2f} dB (>= 25), per-bin merged {bins} (decreasing)")


# overfit loss drop: the first 2k steps of the recipe run are a 2k-step run (constant lr)
LOSS_DROP_STEPS = 2000
LOSS_DROP_RATIO = 0.4  # committed after the calibration run (measured 0.35)


def test_overfit_loss_drop(overfit):
    losses = np.asarray(overfit[2]["losses"][:LOSS_DROP_STEPS])
    first, last = losses[:50].mean(), losses[-50:].mean()
    assert last <= LOSS_DROP_RATIO * first, (first, last)


def test_step_refinement(overfit):
    """Reconstruction error at T=50 is at most the T=8 error plus 10%."""
    ck, designs, _ = overfit
    model = ck.build_model()
    model.eval()
    err = {}
    for steps in (8, 50):
        rows = [evaluate_i2l(model, designs, SampleConfig(steps=steps, seed=seed)).per_design
                for seed in (0, 1)]
        err[steps] = np.mean([10 ** (-r["psnr_merged"] / 10) for rs in rows for r in rs])
    assert err[50] <= 1.1 * err[8], err


# -- 8. oracle one-step recovery -----------------------------------------------------------

def test_criterion_08_oracle(request):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z0 = torch.as_tensor(rng.standard_normal((1, 16, 256)))
        eps = torch.as_tensor(rng.standard_normal((1, 16, 256)))
        noised = torch.ones(1, 16, dtype=torch.bool)
        out = euler_integrate(lambda x, t: (z0 - x) / t, eps, torch.zeros_like(z0), noised, 1)
        worst = max(worst, (torch.abs(out - z0) / torch.clamp(torch.abs(z0), min=1.0)).max().item())
    ok = worst <= 4 * np.finfo(np.float64).eps
    record(request, 8, ok, f"T=1 Euler on the single-datum field: max rel error {worst:.1e} "
                           f"(<= 4 eps = {4 * np.finfo(np.float64).eps:.1e})")


# -- 9. distillation --------------------------------------------------------------------------

TOY_MEANS, TOY_STDS = [-2.0, 2.0], [0.5, 0.5]


def test_criterion_09_dmd(request, overfit, overfit_report):
    t0 = time.perf_counter()
    # zero-gap
    teacher = train_toy_teacher(lambda n, r: sample_mixture(n, TOY_MEANS, TOY_STDS, r), steps=2000)
    b = toy_batch_maker(512)(np.random.default_rng(0))
    x = torch.randn(512, 1, 1, dtype=torch.float64)
    zero_gap = torch.count_nonzero(dmd_student_gradient(teacher, teacher, x, b,
                                                        np.random.default_rng(1))).item() == 0
    # 1-D two-mode toy, 4-step student
    ref = toy_sample(teacher, 4000, 50, 1)
    baseline = energy_distance(ref, toy_sample(teacher, 4000, 50, 2))
    cfg = DistillConfig(student_steps=4, critic_ratio=5, lr_student=1e-3, lr_critic=1e-3,
                        iterations=1500, batch_size=256)
    res = distill_fields(teacher, toy_batch_maker(256), cfg)
    before = energy_distance(ref, toy_sample(teacher, 4000, 4, 3))
    after = energy_distance(ref, toy_sample(res.student, 4000, 4, 3))
    toy_ok = after <= 2 * baseline
    # layered toy: 8-step student vs 50-step teacher on the overfit set
    ck, designs, _ = overfit
    dcfg = load_recipe().distill
    student_ck, _ = distill(ck, designs, dcfg, load_recipe().train)
    student = student_ck.build_model()
    student.eval()
    rs = evaluate_i2l(student, designs, SampleConfig(steps=dcfg.student_steps))
    gap = overfit_report.psnr_merged - rs.psnr_merged
    layered_ok = gap <= 3.0
    dt = time.perf_counter() - t0
    ok = zero_gap and toy_ok and layered_ok and dt <= 20 * 60
    record(request, 9, ok,
           f"zero-gap exact={zero_gap}; 1-D energy distance {after:.2e} vs 2x baseline "
           f"{2 * baseline:.2e} (4-step teacher {before:.2e}); layered student T={dcfg.student_steps} "
           f"{rs.psnr_merged:.2f} dB vs teacher T=50 {overfit_report.psnr_merged:.2f} dB, "
           f"gap {gap:.2f} dB (<= 3); {dt / 60:.1f} min (<= 20)")


# -- 10. efficiency model -------------------------------------------------------------------

def test_criterion_10_efficiency(request):
    t0 = time.perf_counter()
    row = bench_efficiency([20], samples=64)[0]
    dt = time.perf_counter() - t0
    ok = row["quad_flop_ratio"] >= 10 and row["token_ratio"] >= 5 and dt < 5
    record(request, 10, ok, f"K=20, 64 synthetic layouts: quadratic-FLOP ratio "
                            f"{row['quad_flop_ratio']:.1f}x (>= 10), token ratio "
                            f"{row['token_ratio']:.2f}x (>= 5), memory ratio "
                            f"{row['memory_ratio']:.1f}x, {dt:.1f}s (< 5s)")


# -- 11. CLI determinism -------------------------------------------------------------------

def test_criterion_11_determinism(request, tmp_path, monkeypatch):
    trees, codes = [], []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        monkeypatch.chdir(root)
        cfg = write_config(Path("cfg.yaml"))
        codes.append(run_all(Path("."), cfg))
        trees.append({k: v for k, v in tree_bytes(Path(".")).items()})
    same = trees[0] == trees[1]
    diff = sorted(k for k in set(trees[0]) | set(trees[1]) if trees[0].get(k) != trees[1].get(k))
    all_ok = all(c == 0 for c in codes[0].values()) and codes[0] == codes[1]
    ok = same and all_ok
    record(request, 11, ok, f"{len(codes[0])} commands run twice, {len(trees[0])} files, "
                            f"{len(diff)} differing (== 0), exit codes ok={all_ok}")
