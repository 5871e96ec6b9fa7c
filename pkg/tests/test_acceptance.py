"""Acceptance suite: one test per shipped guarantee, tolerances pinned.

Each test states its tolerance inline and prints a short evidence line so a
failed run shows the measured numbers next to the bound.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from nacn2n.errors import ConfigError
from nacn2n.experiments import (
    RESULT_COLUMNS,
    REFERENCE_RESULTS,
    DataConfig,
    ExperimentPlan,
    build_dataset,
    run_ablations,
    run_plan,
    sweep_backbones,
    sweep_module_count,
    sweep_noise_variance,
    tabulate_methods,
)
from nacn2n.imaging import ImageGrid
from nacn2n.metrics import evaluate, psnr, ssim
from nacn2n.models import BackboneConfig, apply_chain, build_chain
from nacn2n.noise import NoiseSpec, corrupt, rng_from_seed, stream_for, noise_stats, verify_additivity
from nacn2n.pairs import build_pairs
from nacn2n.phantoms import make_phantoms
from nacn2n.training import TrainConfig, lr_schedule, resume_training, train


def grid(values, id="img"):
    return ImageGrid(np.asarray(values, dtype=np.float32), (0.0, 1.0), id)


def test_criterion_01_noise_statistics():
    # 1e6 samples on a constant image p = 0.5: |mean| <= 4*sigma/1e3,
    # variance within 2% of p/k + sigma^2/255^2, additivity within 5%.
    img = grid(np.full((1000, 1000), 0.5), id="const")
    spec = NoiseSpec(poisson_scale=255.0, gaussian_variance=15.0, seed=11)
    report = noise_stats(img, spec, rng_from_seed(11, 0x57A75), 10**6)
    expected = 0.5 / 255.0 + 15.0 / 255.0**2
    assert report.sample_count == 10**6
    assert report.expected_variance == pytest.approx(expected, rel=1e-12)
    bound = 4.0 * math.sqrt(expected) / 1e3
    assert abs(report.empirical_mean) <= bound
    assert abs(report.empirical_variance - expected) / expected <= 0.02
    assert report.tolerance_pass["mean_within_clt_bound"]
    assert report.tolerance_pass["variance_within_2pct"]

    spec_o = NoiseSpec(poisson_scale=255.0, gaussian_variance=15.0, seed=5)
    spec_s = NoiseSpec(poisson_scale=510.0, gaussian_variance=10.0, seed=6)
    two_class = grid(np.concatenate(
        [np.full((100, 200), 0.25), np.full((100, 200), 0.75)], axis=0
    ), id="two-class")
    add = verify_additivity(two_class, spec_o, spec_s, n_samples=200_000)
    assert add.max_rel_deviation <= 0.05
    assert add.tolerance_pass["additivity_within_5pct"]
    assert add.tolerance_pass["analytic_within_5pct"]
    print(
        f"criterion 1: mean {report.empirical_mean:+.2e} (bound {bound:.2e}), "
        f"var {report.empirical_variance:.6e} vs {expected:.6e}, "
        f"additivity dev {add.max_rel_deviation:.3%}"
    )


def test_criterion_02_pairing_expectation():
    # The average of >= 64 corrupted targets converges to the source within
    # a per-pixel 4*sigma/sqrt(64) bound (fixed seed; margin ~0.65 of bound).
    seed, K = 2, 64
    src = make_phantoms(1, size=16, seed=seed)[0]
    spec = NoiseSpec(poisson_scale=255.0, gaussian_variance=15.0, seed=seed)
    acc = np.zeros(src.pixels.shape, dtype=np.float64)
    for k in range(K):
        acc += corrupt(src, spec, stream_for(seed, src.id, k)).pixels.astype(np.float64)
    avg = acc / K
    sigma = np.sqrt(spec.variance_at(src.pixels.astype(np.float64)))
    bound = 4.0 * sigma / math.sqrt(K)
    deviation = np.abs(avg - src.pixels.astype(np.float64))
    assert K >= 64
    assert np.all(deviation <= bound), f"worst ratio {(deviation / bound).max():.3f}"
    print(f"criterion 2: worst |avg-src| at {(deviation / bound).max():.3f} of the 4sigma/8 bound")


def test_criterion_03_parameter_sharing():
    # parameter_count identical for T in {1,3,5,7}; chain forward equals T
    # manual module applications bit-for-bit.
    torch.manual_seed(0)
    x = torch.randn(1, 1, 16, 16)
    for name in ("unet", "cpce", "resnet"):
        cfg = BackboneConfig(name, base_channels=8, depth=2)
        chains = {T: build_chain(cfg, T, init_seed=3) for T in (1, 3, 5, 7)}
        counts = {T: c.parameter_count() for T, c in chains.items()}
        assert len(set(counts.values())) == 1, counts
        for T, chain in chains.items():
            chain.eval()
            with torch.no_grad():
                composed = chain(x)
                manual = x
                for _ in range(T):
                    manual = chain.module(manual)
            assert torch.equal(composed, manual), (name, T)
        print(f"criterion 3: {name} {counts[1]} params for all T, unrolling bit-exact")


def test_criterion_04_gradient_check():
    # Backprop through the composed chain vs central finite differences,
    # relative error <= 1e-3 in float64. Seeds are chosen so every ReLU
    # pre-activation and maxpool top-2 gap stays > 1e-4, i.e. > 100x the
    # differencing step; at a kink the central difference is meaningless.
    chain = build_chain(BackboneConfig("unet", base_channels=2, depth=1), 2, init_seed=37)
    chain = chain.double()
    rng = np.random.default_rng(42)
    x = torch.from_numpy(rng.uniform(0.0, 1.0, (1, 1, 16, 16))).double()
    y = torch.from_numpy(rng.uniform(0.0, 1.0, (1, 1, 16, 16))).double()

    def loss_value():
        return torch.mean((chain(x) - y) ** 2)

    chain.zero_grad()
    loss_value().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in chain.parameters()])

    h = 1e-6
    numeric = []
    with torch.no_grad():
        for p in chain.parameters():
            flat = p.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_value().item()
                flat[i] = orig - h
                down = loss_value().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = torch.norm(analytic - numeric) / torch.norm(numeric)
    assert rel.item() <= 1e-3, f"relative error {rel.item():.3e}"
    print(f"criterion 4: {numeric.numel()} params, gradient rel err {rel.item():.2e} <= 1e-3")


def test_criterion_05_metric_oracles():
    # Three hand-computed PSNR values at 1e-4 dB, exact SSIM identity, and
    # the 2x2 SSIM case against an independent scalar substitution at 1e-6.
    x = grid([[0.25, 0.5], [0.75, 1.0]])
    assert psnr(x, x) == 100.0
    zeros, ones = grid(np.zeros((4, 4))), grid(np.ones((4, 4)))
    assert psnr(zeros, ones) == pytest.approx(0.0, abs=1e-4)
    a = grid([[0.0, 0.0], [0.0, 0.0]])
    b = grid([[0.5, 0.0], [0.0, 0.0]])
    assert psnr(a, b) == pytest.approx(12.0412, abs=1e-4)

    assert ssim(x, x) == 1.0

    sx = grid([[0.0, 1.0], [0.0, 1.0]])
    sy = grid([[1.0, 0.0], [1.0, 0.0]])
    mx = my = 0.5
    vx = vy = 0.25
    cov = -0.25
    c1, c2 = 0.01**2, 0.03**2
    by_hand = ((2 * mx * my + c1) * (2 * cov + c2)) / (
        (mx**2 + my**2 + c1) * (vx + vy + c2)
    )
    assert ssim(sx, sy) == pytest.approx(by_hand, abs=1e-6)
    print(
        "criterion 5: psnr {100.0, ~0.0, 12.0412} ok, ssim identity exact, "
        f"2x2 case {by_hand:.6f} matches"
    )


def test_criterion_06_schedule_reproduction():
    # lr values exactly 1e-4 / 5e-5 / 2.5e-5 at epochs 0 / 20 / 40-59.
    cfg = TrainConfig()
    assert cfg.base_lr == 1e-4 and cfg.lr_half_period == 20
    for epoch in range(0, 20):
        assert lr_schedule(epoch, cfg) == 1e-4
    for epoch in range(20, 40):
        assert lr_schedule(epoch, cfg) == 5e-5
    for epoch in range(40, 60):
        assert lr_schedule(epoch, cfg) == 2.5e-5
    print("criterion 6: lr 1e-4 / 5e-5 / 2.5e-5 at 0 / 20 / 40-59, exact")


def test_criterion_07_desk_scale_training_efficacy():
    # 200 synthetic 64x64 phantom pairs (n2n_pair, variance 15, k=255),
    # 30 epochs, default unet at base 16, T=5: test PSNR >= +2 dB over the
    # corrupted-input baseline and SSIM above baseline.
    t0 = time.monotonic()
    cpu0 = time.process_time()
    seed = 7
    phantoms = make_phantoms(110, size=64, seed=seed)
    train_sources, test_sources = phantoms[:100], phantoms[100:]
    spec = NoiseSpec(poisson_scale=255.0, gaussian_variance=15.0, seed=seed)
    pairs = build_pairs(train_sources, spec, copies=2, mode="n2n_pair", master_seed=seed)
    assert len(pairs) == 200
    assert pairs.sources[0].shape == (64, 64)

    chain = build_chain(BackboneConfig("unet", base_channels=16), 5, init_seed=seed)
    result = train(chain, pairs, TrainConfig(epochs=30, base_lr=1e-3, seed=seed))
    assert len(result.history) == 30

    test_inputs = [
        corrupt(img, spec, stream_for(seed, img.id, 999)) for img in test_sources
    ]
    agg = evaluate(chain, test_inputs, test_sources).aggregate
    delta_psnr = agg["psnr_mean"] - agg["baseline_psnr_mean"]
    delta_ssim = agg["ssim_mean"] - agg["baseline_ssim_mean"]
    elapsed = time.monotonic() - t0
    cpu_seconds = time.process_time() - cpu0
    print(
        f"criterion 7: PSNR {agg['psnr_mean']:.2f} vs baseline "
        f"{agg['baseline_psnr_mean']:.2f} ({delta_psnr:+.2f} dB), "
        f"SSIM {agg['ssim_mean']:.4f} vs {agg['baseline_ssim_mean']:.4f} "
        f"({delta_ssim:+.4f}), {elapsed:.0f}s wall / {cpu_seconds:.0f}s cpu"
    )
    assert delta_psnr >= 2.0, f"PSNR gain {delta_psnr:.2f} dB below the 2 dB floor"
    assert delta_ssim > 0.0, f"SSIM did not improve ({delta_ssim:+.4f})"
    assert cpu_seconds <= 900.0, f"budget exceeded: {cpu_seconds:.0f}s cpu > 15 min"


def test_criterion_08_determinism_and_resume(tmp_path):
    # Identical runs give identical loss histories; checkpoint-resume equals
    # straight-through training exactly at float32.
    sources = make_phantoms(4, size=32, seed=8)
    spec = NoiseSpec(seed=8)
    pairs = build_pairs(sources, spec, copies=2, mode="n2n_pair", master_seed=8)
    cfg = TrainConfig(epochs=4, seed=8, checkpoint_every=2)
    model_cfg = BackboneConfig("unet", base_channels=4, depth=2)

    def fresh_run(ckpt_dir=None):
        chain = build_chain(model_cfg, 2, init_seed=8)
        return chain, train(chain, pairs, cfg, checkpoint_dir=ckpt_dir)

    chain_a, run_a = fresh_run(tmp_path / "a")
    chain_b, run_b = fresh_run()
    losses_a = [h["loss"] for h in run_a.history]
    assert losses_a == [h["loss"] for h in run_b.history]
    for pa, pb in zip(chain_a.parameters(), chain_b.parameters()):
        assert torch.equal(pa, pb)

    resumed = resume_training(tmp_path / "a" / "epoch_0002.ckpt", pairs)
    assert [h["loss"] for h in resumed.history] == losses_a
    for pa, pr in zip(chain_a.parameters(), resumed.chain.parameters()):
        assert torch.equal(pa, pr)
    print(f"criterion 8: histories identical ({losses_a[-1]:.6f} final), resume bit-exact")


def test_criterion_09_harness_completeness(tmp_path):
    # Every protocol op completes at desk scale and emits schema-valid tables.
    t0 = time.monotonic()
    base = dict(
        output_dir=str(tmp_path / "runs"),
        master_seed=9,
        chain_length=2,
        data=DataConfig(n_sources=6, image_size=32, train_fraction=0.5),
        model=BackboneConfig("unet", base_channels=16, depth=2),
        train=TrainConfig(epochs=2, seed=9),
    )

    def check_table(name, result, n_rows):
        rows = result["rows"]
        assert len(rows) == n_rows
        for row in rows:
            assert set(RESULT_COLUMNS) <= set(row)
            assert row["status"] == "ok"
            assert np.isfinite(row["psnr"]) and np.isfinite(row["ssim"])
        out = tmp_path / "runs" / name
        assert (out / "results.csv").exists() and (out / "results.json").exists()
        header = (out / "results.csv").read_text().splitlines()[0]
        assert header == ",".join(RESULT_COLUMNS)
        payload = json.loads((out / "results.json").read_text())
        assert payload["metadata"]["reference"] == REFERENCE_RESULTS

    check_table("bb", sweep_backbones(ExperimentPlan(
        name="bb", axis="backbone", axis_values=("unet", "cpce", "resnet"), **base
    )), 3)
    check_table("mc", sweep_module_count(ExperimentPlan(
        name="mc", axis="module_count", axis_values=(1, 2, 3), **base
    )), 3)
    check_table("var", sweep_noise_variance(ExperimentPlan(
        name="var", axis="gaussian_variance", axis_values=(5.0, 15.0, 25.0), **base
    )), 3)
    check_table("abl", run_ablations(ExperimentPlan(
        name="abl", axis="ablation", **base
    )), 4)
    for figure in ("mc/psnr_vs_module_count.png", "var/ssim_vs_gaussian_variance.png"):
        assert (tmp_path / "runs" / figure).exists()

    dataset = build_dataset(base["data"], NoiseSpec(), 9)
    chain = build_chain(base["model"], 2, init_seed=9)
    denoised = [apply_chain(chain, img)[0] for img in dataset.test_observed]
    table = tabulate_methods(
        dataset.test_clean, dataset.test_observed, ours=denoised,
        external_dirs=None, out_dir=tmp_path / "methods",
    )
    assert [r["method"] for r in table["rows"]] == ["noisy input", "ours"]
    assert (tmp_path / "methods" / "methods.csv").exists()
    elapsed = time.monotonic() - t0
    assert elapsed < 3600.0
    print(f"criterion 9: 5 protocol ops, 13 trained points, tables schema-valid, {elapsed:.0f}s")


def test_criterion_10_full_scale_hook():
    # Config-level only: scale="full" lifts the desk caps so the published
    # recipe (60 epochs, lr 1e-4) is expressible; the full-scale reference
    # numbers ride along as labeled metadata, reported, never asserted.
    recipe = TrainConfig()
    plan = ExperimentPlan(
        name="full_run", scale="full",
        data=DataConfig(n_sources=600, image_size=512, train_fraction=0.9),
        train=recipe,
    )
    assert plan.train.epochs == 60
    assert plan.train.base_lr == 1e-4

    desk = ExperimentPlan(
        name="too_big", scale="desk",
        data=DataConfig(n_sources=4, image_size=32),
        model=BackboneConfig("unet", base_channels=4, depth=2),
        train=TrainConfig(epochs=60, seed=1),
    )
    with pytest.raises(ConfigError, match="scale"):
        run_plan(desk)

    ref = REFERENCE_RESULTS["backbones"]["unet"]
    assert REFERENCE_RESULTS["label"] == "published full-scale Mayo reference, not reproduced"
    print(
        f"criterion 10: full-scale recipe expressible; reference "
        f"{ref['psnr']} dB / {ref['ssim']} reported for comparison only"
    )
