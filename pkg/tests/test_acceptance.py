"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 5 and 6 train the desk-scale models once per session (a few minutes on one CPU).
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from conftest import finite_difference_check, record_criterion, stratified_normal
from headmotion import cli
from headmotion.core import ConditionBundle, PoseSequence, compute_norm_stats, normalize
from headmotion.diffusion import (
    DenoiserConfig,
    SamplerConfig,
    build_denoiser,
    cfg_combine,
    condition_arrays,
    forward_diffuse,
    generate_poses,
    make_schedule,
    pld_loss,
    pld_loss_latent,
    sample_with,
    scaled_beta_range,
    train_pld,
)
from headmotion.flow import backward_warp, compose_total_flow, refine_level
from headmotion.losses import region_loss_fraction, sync_loss
from headmotion.metrics import (
    amplitude_envelope_correlation,
    classify_motion,
    diversity,
    diversity_exhaustive,
    extract_features,
    fid,
    pca_curve,
)
from headmotion.nn import randomize_parameters
from headmotion.synthetic import generate_sample, generate_synthetic_dataset, make_specs
from headmotion.vae import VaeConfig, build_vae, huber_loss, reconstruction_error, reparameterize, train_vae, vae_loss
from test_flow import brute_force_warp


# -- shared desk-scale training --------------------------------------------------


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    data = generate_synthetic_dataset(make_specs(100, seed=0))
    poses = [d[0] for d in data]
    stats = compute_norm_stats(poses)
    seqs = [normalize(p, stats) for p in poses]

    t0 = time.perf_counter()
    vae, vae_hist = train_vae(seqs, VaeConfig(steps=2000), ckpt_dir=root / "vae", stats=stats)
    vae_time = time.perf_counter() - t0

    t0 = time.perf_counter()
    pld, pld_hist = train_pld(vae, list(zip(seqs, [d[1] for d in data])), DenoiserConfig(steps=5000),
                              ckpt_dir=root / "pld")
    pld_time = time.perf_counter() - t0
    return dict(data=data, stats=stats, seqs=seqs, vae=vae, pld=pld, vae_time=vae_time, pld_time=pld_time,
                vae_hist=vae_hist, pld_hist=pld_hist)


# -- 1. exact math -------------------------------------------------------------------


def test_criterion_1_exact_math():
    t0 = time.perf_counter()
    checks = {}
    checks["huber 0.75"] = abs(float(huber_loss(torch.tensor([0.0, 2.0], dtype=torch.float64),
                                                torch.zeros(2, dtype=torch.float64))) - 0.75)
    checks["huber 0.125"] = abs(float(huber_loss(torch.tensor([0.5], dtype=torch.float64),
                                                 torch.zeros(1, dtype=torch.float64))) - 0.125)
    one, zero = torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64)
    checks["guidance s=1"] = abs(float(cfg_combine(one, zero, 1.0)) - 1.0)
    checks["guidance s=0"] = abs(float(cfg_combine(one, zero, 0.0)) - 0.0)
    checks["guidance s=7.5"] = abs(float(cfg_combine(one, zero, 7.5)) - 7.5)
    s = make_schedule(4)
    s.alpha_bars = np.array([1.0, 1.0, 0.25, 0.0, 0.5])
    z0, eps = torch.tensor([0.7], dtype=torch.float64), torch.tensor([-1.3], dtype=torch.float64)
    checks["diffuse ab=1"] = abs(float(forward_diffuse(z0, 1, eps, s)) - 0.7)
    checks["diffuse ab=0.25"] = abs(float(forward_diffuse(z0, 2, eps, s)) - (0.5 * 0.7 - math.sqrt(3) / 2 * 1.3))
    checks["diffuse ab=0"] = abs(float(forward_diffuse(z0, 3, eps, s)) + 1.3)
    v = np.array([0.6, 0.8])
    checks["sync identical"] = abs(sync_loss([(v, v)]))
    checks["sync orthogonal"] = abs(sync_loss([(np.array([1.0, 0.0]), np.array([0.0, 1.0]))]) + math.log(1e-7))
    checks["sync antiparallel"] = abs(sync_loss([(v, -v)]) + math.log(1e-7))
    img = np.random.default_rng(0).random((10, 10, 3))
    checks["region full"] = abs(region_loss_fraction(img, img * 0, np.ones((10, 10), int)) - 1.0)
    region = np.zeros((50, 50), int)
    region[:10, :10] = 1
    checks["region 4%"] = abs(region_loss_fraction(np.full((50, 50), 0.3), np.zeros((50, 50)), region) - 0.04)
    elapsed = time.perf_counter() - t0
    worst = max(checks, key=checks.get)
    ok = all(v < 1e-9 for v in checks.values()) and abs(-math.log(1e-7) - 16.118) < 1e-3 and elapsed < 5
    record_criterion(1, ok, f"{len(checks)} identities, worst {worst} err={checks[worst]:.1e}, {elapsed:.2f}s")
    assert ok, checks


# -- 2. oracle equivalence --------------------------------------------------------


def test_criterion_2_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    errs = {}

    errs["warp"] = max(
        np.abs(backward_warp(src, F) - brute_force_warp(src, F)).max()
        for src, F in ((rng.standard_normal((8, 8, 3)), rng.uniform(-2, 2, (8, 8, 2))) for _ in range(50))
    )

    worst = 0.0
    for _ in range(20):
        n = int(rng.choice([32, 64, 128]))
        sizes = [8 * 2 ** k for k in range(int(math.log2(n // 8)) + 1)]
        dFs = [rng.standard_normal((m, m, 2)) for m in sizes]
        Fc = rng.standard_normal((n, n, 2))
        F = None
        for d in dFs:
            z = np.zeros(d.shape[:2] + (1,))
            _, F, _ = refine_level(z, z, d, np.zeros(d.shape[:2]), F)
        worst = max(worst, np.abs(compose_total_flow(Fc, dFs) - (Fc + F)).max())
    errs["composition"] = worst

    worst = 0.0
    z = np.stack([np.array([1, -1, 1, -1.0]), np.array([1, 1, -1, -1.0])], axis=1)
    for _ in range(10):
        sr, sg, mr, mg = rng.uniform(0.2, 3, 2), rng.uniform(0.2, 3, 2), rng.standard_normal(2), rng.standard_normal(2)
        oracle = np.sum((mr - mg) ** 2) + np.sum(sr**2 + sg**2 - 2 * sr * sg)
        worst = max(worst, abs(fid(mr + z * sr, mg + z * sg) - oracle))
    errs["fid diagonal"] = worst
    A = rng.standard_normal((40, 6))
    errs["fid(A,A)"] = abs(fid(A, A))

    rel = 0.0
    for N in (10, 25, 50):
        X = rng.standard_normal((N, 8))
        rel = max(rel, abs(diversity(X, 200, seed=N) / diversity_exhaustive(X) - 1))
    errs["diversity rel"] = rel

    seqs = [PoseSequence(rng.standard_normal((int(rng.integers(5, 30)), 8)) @ rng.standard_normal((8, 8)))
            for _ in range(6)]
    pooled = np.concatenate([s.values for s in seqs])
    w, V = np.linalg.eigh(np.cov(pooled, rowvar=False, bias=True))
    pc = V[:, np.argmax(w)]
    pc = pc if pc[np.argmax(np.abs(pc))] > 0 else -pc
    errs["pca"] = max(np.abs(c - (s.values - pooled.mean(0)) @ pc).max()
                      for s, c in zip(seqs, pca_curve(seqs).curves))

    tol = {"warp": 1e-6, "composition": 1e-5, "fid diagonal": 1e-6, "fid(A,A)": 1e-6, "diversity rel": 0.10,
           "pca": 1e-6}
    elapsed = time.perf_counter() - t0
    ok = all(errs[k] < tol[k] for k in tol) and elapsed < 60
    record_criterion(2, ok, ", ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f", {elapsed:.1f}s")
    assert ok, errs


# -- 3. gradients ------------------------------------------------------------------


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    tiny_vae = dict(D=4, T=8, n_latent=1, latent_dim=4, width=16, layers=1, heads=2)
    vae = build_vae(VaeConfig(**tiny_vae))
    randomize_parameters(vae, scale=0.3, seed=1)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(3, 8, 4, generator=g, dtype=torch.float64)
    noise = torch.randn(3, 1, 4, generator=g, dtype=torch.float64)
    vae.double()

    def vloss():
        d = vae.encode(x)
        return vae_loss(x, vae.decode(reparameterize(d, noise)), d, beta=0.1)[0]

    e_vae = finite_difference_check(vae, vloss, n_params=24)

    tiny = dict(n_latent=1, latent_dim=4, d_model=16, layers=4, heads=2, time_dim=8, text_dim=6, audio_dim=5,
                audio_tokens=3, T_diff=10, p_uncond=0.3)
    den = build_denoiser(DenoiserConfig(**tiny))
    randomize_parameters(den, scale=0.3, seed=3)
    frozen = build_vae(VaeConfig(**tiny_vae))
    randomize_parameters(frozen, scale=0.3, seed=5)
    rng = np.random.default_rng(0)
    batch = [(PoseSequence(rng.standard_normal((8, 4))),
              ConditionBundle(rng.standard_normal(6).astype(np.float32),
                              rng.standard_normal((7, 5)).astype(np.float32))) for _ in range(6)]
    sched = make_schedule(10, *scaled_beta_range(10))
    den.double()
    e_pld = finite_difference_check(den, lambda: pld_loss(den, frozen, batch, sched, torch.Generator().manual_seed(11)),
                                    n_params=24)
    elapsed = time.perf_counter() - t0
    ok = len(e_vae) >= 20 and len(e_pld) >= 20 and max(e_vae) < 1e-3 and max(e_pld) < 1e-3 and elapsed < 120
    record_criterion(3, ok, f"vae max rel err {max(e_vae):.1e} ({len(e_vae)} params), "
                            f"pld max rel err {max(e_pld):.1e} ({len(e_pld)} params), {elapsed:.1f}s")
    assert ok


# -- 4. schedule statistics ---------------------------------------------------


def test_criterion_4_statistics():
    t0 = time.perf_counter()
    s = make_schedule(100, *scaled_beta_range(100))
    ratios = {}
    for t in (5, 30, 90):
        zt = forward_diffuse(torch.zeros(10_000, dtype=torch.float64), t, stratified_normal(10_000, seed=t), s)
        ratios[t] = float(zt.var()) / (1 - s.alpha_bars[t])
    s10 = make_schedule(10, *scaled_beta_range(10))
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(10_000, 1, 1, generator=g, dtype=torch.float64)
    text = torch.zeros(10_000, 1, dtype=torch.float64)
    audio = torch.zeros(10_000, 1, 1, dtype=torch.float64)
    null = torch.zeros(10_000, dtype=torch.bool)
    loss = float(pld_loss_latent(lambda z, *_: torch.zeros_like(z), z0, text, audio, null, s10,
                                 torch.Generator().manual_seed(2), 0.1))
    sigma = math.sqrt(2.0 / 10_000)
    elapsed = time.perf_counter() - t0
    ok = all(abs(r - 1) < 0.02 for r in ratios.values()) and abs(loss - 1) < 3 * sigma and elapsed < 60
    record_criterion(4, ok, "var ratios " + ", ".join(f"t={t}:{r:.4f}" for t, r in ratios.items())
                     + f"; zero-predictor loss {loss:.4f} (3 sigma = {3 * sigma:.4f}), {elapsed:.1f}s")
    assert ok


# -- 5. desk-scale VAE -----------------------------------------------------------


def test_criterion_5_vae_reconstruction(desk):
    recon = reconstruction_error(desk["vae"], desk["seqs"])
    ok = recon < 0.05 and desk["vae_time"] < 300
    record_criterion(5, ok, f"normalized Huber reconstruction {recon:.4f} (< 0.05), "
                            f"training {desk['vae_time']:.0f}s for {len(desk['vae_hist'])} steps")
    assert ok


# -- 6. desk-scale PLD + conditional generation --------------------------------------


def test_criterion_6_conditional_generation(desk):
    vae, pld, stats = desk["vae"], desk["pld"], desk["stats"]
    held_out = [generate_sample(s) for s in make_specs(20, seed=1)]
    t0 = time.perf_counter()
    gen = generate_poses(vae, pld, pld.cfg.schedule(), [h[1] for h in held_out], 1, SamplerConfig(7.5, seed=0),
                         stats)
    gen_time = time.perf_counter() - t0
    labels = [h[2] for h in held_out]
    acc = float(np.mean([classify_motion(g) == lab for g, lab in zip(gen, labels)]))
    f_train = extract_features(vae, desk["seqs"])
    f_gen = extract_features(vae, [normalize(g, stats) for g in gen])
    div_ratio = diversity(f_gen) / diversity(f_train)
    env = [amplitude_envelope_correlation(g, h[3]).r for g, h in zip(gen, held_out) if h[2] == "nod"]
    env_median = float(np.median(env))
    total = desk["vae_time"] + desk["pld_time"] + gen_time
    ok = acc >= 0.90 and abs(div_ratio - 1) <= 0.30 and env_median > 0.5 and total < 1200
    record_criterion(6, ok, f"probe accuracy {acc:.2f} (>= 0.90), diversity ratio {div_ratio:.2f} (0.7-1.3), "
                            f"nod envelope r median {env_median:.2f} (> 0.5), FID {fid(f_train, f_gen):.3f}, "
                            f"PLD {len(desk['pld_hist'])} steps in {desk['pld_time']:.0f}s, total {total:.0f}s")
    assert ok


# -- 7. CLI determinism ----------------------------------------------------------

TINY_RUN = {
    "data": {"n_train_per_class": 4, "n_eval_per_class": 2, "T": 16, "text_dim": 16, "audio_dim": 12},
    "vae": {"T": 16, "n_latent": 2, "latent_dim": 4, "width": 16, "layers": 1, "heads": 2,
            "steps": 20, "batch_size": 8, "warmup": 5, "ckpt_every": 10},
    "pld": {"n_latent": 2, "latent_dim": 4, "d_model": 16, "layers": 2, "heads": 2, "time_dim": 8,
            "text_dim": 16, "audio_dim": 12, "audio_tokens": 4, "T_diff": 10, "steps": 20,
            "batch_size": 8, "ckpt_every": 10},
    "sample": {"count": 2},
}


def test_criterion_7_cli_determinism(tmp_path):
    from PIL import Image

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_RUN))
    img = tmp_path / "in.pgm"
    Image.fromarray((np.arange(32 * 32).reshape(32, 32) % 251).astype(np.uint8), mode="L").save(img)
    (tmp_path / "flow.json").write_text(json.dumps({"kind": "random", "seed": 4, "amplitude": 0.7}))
    src = tmp_path / "a" / "data" / "eval"
    commands = [
        ["make-data"],
        ["train-vae"],
        ["train-pld"],
        ["sample", "--label", "nod"],
        ["eval"],
        ["sample", "--manifest", str(src / "manifest.json"), "--count", "1"],
        ["export-curve", str(src / "0000_nod.csv"), str(src / "0001_shake.csv")],
        ["warp-demo", "--image", str(img), "--flow-spec", str(tmp_path / "flow.json")],
    ]
    for run in ("a", "b"):
        for argv in commands:
            assert cli.main(argv + ["--config", str(cfg), "--out", str(tmp_path / run)]) == 0, argv
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.suffix in (".csv", ".json", ".f32", ".pgm"))
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    ok = not differing and len(files) > 30
    record_criterion(7, ok, f"{len(commands)} commands x 2 runs, {len(files)} output files, "
                            f"{len(differing)} differ {differing[:3]}")
    assert ok


# -- 8. guidance path identity -------------------------------------------------------


def test_criterion_8_guidance_identity(desk):
    pld = desk["pld"]
    conds = [generate_sample(s)[1] for s in make_specs(2, seed=5)]
    text, audio, null = condition_arrays(conds, pld.cfg)
    shape = (pld.cfg.n_latent, pld.cfg.latent_dim)
    cfg = SamplerConfig(1.0, "ancestral", None, 0)

    def run(skip):
        gens = [torch.Generator().manual_seed(100 + i) for i in range(len(conds))]
        return sample_with(pld, pld.cfg.schedule(), (text, audio, null), cfg, gens, shape, skip_redundant=skip)

    err = float((run(False) - run(True)).abs().max())
    ok = err <= 1e-6
    record_criterion(8, ok, f"s=1 full trajectory vs conditional-only, {len(conds)} samples x "
                            f"{pld.cfg.T_diff} steps, max abs diff {err:.1e}")
    assert ok
