"""Acceptance suite. Each test prints one ``CRITERION n PASS|FAIL`` line
(also collected into the terminal summary).

Criteria 4, 5, 6 and 9 share one experiment grid trained on the 2,000-patch
synthetic benchmark (Simple CNN, unaugmented and color-augmented, 3 seeds).
It takes roughly half an hour on one CPU core. Set
``DOMAINSHIFT_ACCEPTANCE_DIR`` to keep the grid between runs; finished jobs
are then reused.
"""

import os
import time
import struct
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from conftest import lcm_quantile_oracle, record_criterion
from domainshift.data import SynthConfig, load_manifest, render_patch, synth_benchmark
from domainshift.errors import ActivationFileError
from domainshift.experiment import ExperimentConfig, ReportBundle, correlation_report, run_experiment_grid
from domainshift.featviz import FeatVizConfig, maximize_filters
from domainshift.models import ModelSpec, build_model, load_checkpoint
from domainshift.repshift import (
    ActivationMatrix,
    extract_mean_activations,
    load_activations,
    representation_shift,
    save_activations,
    wasserstein_1d,
)
from domainshift.transforms import (
    REFERENCE_HE,
    GeoAugConfig,
    HsvJitterConfig,
    estimate_stain_profile,
    geometric_augment,
    hsv_color_augment,
    od_to_rgb,
    rgb_to_od,
    stain_normalize,
)

SEEDS = (0, 1, 2)
HUES = (0, 10, 20, 30, 40, 50, 60)
EXTRA_DOMAINS = {
    "hue-20": dict(hue_shift_deg=-20.0),
    "hue-40": dict(hue_shift_deg=-40.0),
    "faded": dict(contrast_scale=0.6),
    "harsh": dict(contrast_scale=1.4),
}


def check(n, ok, detail):
    record_criterion(n, bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# shared trained grid
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def grid(tmp_path_factory):
    root = Path(os.environ.get("DOMAINSHIFT_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance"))
    if not (root / "synth" / "manifest.csv").is_file():
        synth_benchmark(SynthConfig(n_patches=2000, img_size=96, n_slides=20), root / "synth")
    domains = {f"hue{h:+d}": dict(hue_shift_deg=float(h)) for h in HUES}
    domains.update(EXTRA_DOMAINS)
    cfg = ExperimentConfig.from_dict(
        dict(
            train_manifest=str(root / "synth" / "manifest.csv"),
            out_dir=str(root / "grid"),
            seeds=list(SEEDS),
            models=["simple_cnn"],
            transforms=["original", "color_aug"],
            train=dict(epochs=8),
            test_domains=domains,
        )
    )
    t0 = time.time()
    bundle = run_experiment_grid(cfg, resume=True)
    assert not bundle.failures, bundle.failures
    return cfg, bundle, time.time() - t0


# ---------------------------------------------------------------------------
# 1, 2: Wasserstein distance
# ---------------------------------------------------------------------------


def test_criterion_01_wasserstein_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(500):
        n = int(rng.integers(1, 201))
        m = n if k % 3 == 0 else int(rng.integers(1, 201))
        a, b = rng.uniform(-10, 10, n), rng.uniform(-10, 10, m)
        worst = max(worst, abs(wasserstein_1d(a, b) - lcm_quantile_oracle(a, b)))
    elapsed = time.perf_counter() - t0
    check(1, worst <= 1e-9 and elapsed < 5.0, f"max |err| {worst:.2e}, {elapsed:.2f} s for 500 pairs")


def test_criterion_02_metric_axioms():
    rng = np.random.default_rng(7)
    tol = 1e-9
    bad = []
    for k in range(200):
        a, b, c = (rng.uniform(-10, 10, int(rng.integers(1, 120))) for _ in range(3))
        shift, scale = rng.uniform(-5, 5), rng.uniform(-4, 4)
        ab, ba, bc, ac = wasserstein_1d(a, b), wasserstein_1d(b, a), wasserstein_1d(b, c), wasserstein_1d(a, c)
        checks = {
            "non-negativity": ab >= 0,
            "symmetry": abs(ab - ba) <= tol,
            "identity": wasserstein_1d(a, a) == 0.0 and wasserstein_1d(a, rng.permutation(a)) == 0.0,
            "indistinguishables": ab > 0 or np.array_equal(np.sort(a), np.sort(b)),
            "shift": abs(wasserstein_1d(a + shift, b + shift) - ab) <= tol,
            "scale": abs(wasserstein_1d(scale * a, scale * b) - abs(scale) * ab) <= tol * max(1.0, abs(scale) * ab),
            "triangle": ac <= ab + bc + tol,
        }
        bad += [f"{name}@{k}" for name, ok in checks.items() if not ok]
    check(2, not bad, f"{200 - len({b.split('@')[1] for b in bad})}/200 triples satisfy all axioms {bad[:5]}")


# ---------------------------------------------------------------------------
# 3: R(X, X) = 0
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    return synth_benchmark(SynthConfig(n_patches=40, n_slides=4, seed=3), tmp_path_factory.mktemp("r0"))


def test_criterion_03_self_shift_is_zero(small_dataset):
    values = {}
    for arch in ("simple_cnn", "mini_googlenet"):
        model = build_model(ModelSpec(arch, init_seed=1))
        a = extract_mean_activations(model, small_dataset)
        b = extract_mean_activations(model, small_dataset, batch_size=7)
        values[arch] = (representation_shift(a, a).mean_shift, representation_shift(a, b).mean_shift)
    ok = all(v == (0.0, 0.0) for v in values.values())
    check(3, ok, f"R(X, X) per architecture (same dump, re-extracted): {values}")


# ---------------------------------------------------------------------------
# 4, 5, 6: grid on the synthetic benchmark
# ---------------------------------------------------------------------------


def test_criterion_04_shift_monotone_in_hue(grid):
    cfg, bundle, seconds = grid
    rhos = []
    for seed in SEEDS:
        rs = [bundle.cell("simple_cnn", "original", f"hue{h:+d}").value(seed)[0] for h in HUES]
        rhos.append(float(spearmanr(HUES, rs).statistic))
    median = float(np.median(rhos))
    check(4, median >= 0.9, f"Spearman(hue, R) per seed {np.round(rhos, 3).tolist()}, median {median:.3f} "
                            f"(grid wall time {seconds / 60:.1f} min for 6 models)")


def test_criterion_05_negative_correlation(grid, tmp_path):
    cfg, bundle, _ = grid
    shifted = [c for c in bundle.cells if c.domain != "hue+0"]
    sub = ReportBundle(shifted)
    rs = []
    for seed in SEEDS:
        rep = correlation_report(sub, tmp_path if seed == SEEDS[0] else None, seed=seed)
        rs.append(rep["pearson_r"])
    ok = all(r < 0 for r in rs)
    check(5, ok, f"Pearson(R, accuracy) over {len(shifted)} cells per seed: {np.round(rs, 3).tolist()}")


def test_criterion_06_augmentation_reduces_shift(grid):
    cfg, bundle, _ = grid
    aug = bundle.cell("simple_cnn", "color_aug", "hue+40").repshift_mean
    orig = bundle.cell("simple_cnn", "original", "hue+40").repshift_mean
    check(6, aug < orig, f"R at hue +40: color-augmented {aug:.5f} vs unaugmented {orig:.5f}")


# ---------------------------------------------------------------------------
# 7: stain math
# ---------------------------------------------------------------------------


def _stain_matrix(seed):
    rng = np.random.default_rng(seed)
    W = np.abs(REFERENCE_HE + rng.normal(scale=0.08, size=(3, 2)))
    return W / np.linalg.norm(W, axis=0)


def _concentrations(seed, p=96 * 96):
    rng = np.random.default_rng(seed + 100)
    return rng.exponential(0.6, (2, p)) * (rng.random((2, p)) < 0.5)


def test_criterion_07_stain_math():
    details, ok = [], True

    t0 = time.perf_counter()
    W = _stain_matrix(11)
    prof = estimate_stain_profile(od_to_rgb((W @ _concentrations(11)).T.reshape(96, 96, 3)))
    cos = np.abs(np.sum(prof.stain_matrix * W, axis=0))
    ta = time.perf_counter() - t0
    ok &= bool(cos.min() >= 0.99 and ta < 30)
    details.append(f"(a) column cosines {np.round(cos, 4).tolist()} in {ta:.2f} s")

    t0 = time.perf_counter()
    reference = render_patch(SynthConfig(), 1)[0]
    out = stain_normalize(reference, estimate_stain_profile(reference))
    mae_b = float(np.abs(out.astype(float) - reference).mean())
    tb = time.perf_counter() - t0
    ok &= mae_b <= 5.0 and tb < 30
    details.append(f"(b) self-normalization MAE {mae_b:.2f}/255 in {tb:.2f} s")

    t0 = time.perf_counter()
    # an image inside the two-stain model; per-pixel noise off the stain plane is not representable
    image = od_to_rgb((_stain_matrix(12) @ _concentrations(12)).T.reshape(96, 96, 3))
    p = estimate_stain_profile(image)
    out = stain_normalize(image, p, p)
    mae_c = float(np.abs(out.astype(float) - image).mean())
    tc = time.perf_counter() - t0
    ok &= mae_c <= 2.0 and tc < 30
    details.append(f"(c) identity-profile MAE {mae_c:.2f}/255 in {tc:.2f} s")
    check(7, ok, "; ".join(details))


# ---------------------------------------------------------------------------
# 8: augmentation identities
# ---------------------------------------------------------------------------


def test_criterion_08_augmentation_identities():
    rng = np.random.default_rng(8)
    zero_hsv = HsvJitterConfig(0.0, 0.0, 0.0)
    identity_geo = GeoAugConfig(allow_flips=False, rotations=(0,), crop_size=None, pad=0)
    worst_hsv = worst_geo = 0
    for _ in range(100):
        size = int(rng.integers(8, 97))
        image = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
        h = hsv_color_augment(image, zero_hsv, rng)
        g = geometric_augment(image, identity_geo, rng)
        assert h.shape == g.shape == image.shape
        worst_hsv = max(worst_hsv, int(np.abs(h.astype(int) - image).max()))
        worst_geo = max(worst_geo, int(np.abs(g.astype(int) - image).max()))
    check(8, worst_hsv <= 1 and worst_geo <= 1, f"max abs deviation: HSV {worst_hsv}/255, geometric {worst_geo}/255")


# ---------------------------------------------------------------------------
# 9: feature visualization on the trained model
# ---------------------------------------------------------------------------

FEATVIZ = FeatVizConfig(steps=128, step_size=2.0)


def test_criterion_09_feature_visualization(grid):
    cfg, _, _ = grid
    model = load_checkpoint(Path(cfg.out_dir) / "simple_cnn" / "original" / "0" / "checkpoint")
    t0 = time.perf_counter()
    results = maximize_filters(model, "last_conv", range(128), FEATVIZ)
    elapsed = time.perf_counter() - t0
    live = [r for r in results if not r.dead]
    good = 0
    for r in live:
        grows = r.trace[-1] >= 10 * r.trace[0]
        monotone = np.mean(np.diff(r.trace) >= 0) >= 0.95
        good += bool(grows and monotone)
    frac = good / max(len(live), 1)
    check(9, frac >= 0.9 and elapsed < 300,
          f"{good}/{len(live)} live filters ({frac:.1%}) reach 10x with a >=95% non-decreasing trace; "
          f"{len(results) - len(live)} dead; {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 10: architectures
# ---------------------------------------------------------------------------


def test_criterion_10_architecture_conformance():
    simple = build_model(ModelSpec("simple_cnn"))
    mods = list(simple.net.modules())
    census = (
        sum(isinstance(m, torch.nn.Conv2d) for m in mods),
        sum(isinstance(m, torch.nn.Linear) for m in mods),
        sum(isinstance(m, torch.nn.modules.batchnorm._BatchNorm) for m in mods),
    )
    mini = build_model(ModelSpec("mini_googlenet"))
    names = [n for n, _ in mini.net.named_children()]
    heads = [n for n in names if "aux" in n or n in ("fc", "classifier")]
    x = torch.rand(5, 3, 96, 96)
    shapes = []
    for m in (simple, mini):
        m.net.eval()
        with torch.no_grad():
            shapes.append(tuple(m.net(x).shape))
    # the single head sits right after inception4a, where the first auxiliary classifier attaches
    ok = census == (3, 2, 0) and heads == ["aux1"] and names[names.index("aux1") - 1] == "inception4a"
    ok &= shapes == [(5, 2), (5, 2)]
    check(10, ok, f"Simple CNN (conv, fc, bn) = {census}; Mini-GoogLeNet heads {heads} after "
                  f"{names[names.index('aux1') - 1] if 'aux1' in names else None}; logits {shapes}")


# ---------------------------------------------------------------------------
# 11: persistence
# ---------------------------------------------------------------------------


def test_criterion_11_persistence(tmp_path):
    rng = np.random.default_rng(11)
    values = rng.standard_normal((37, 19)).astype(np.float32)
    values[0, 0], values[1, 1] = np.float32(-0.0), np.float32(1e-45)
    m = ActivationMatrix(values, "relu3", "ref", "abc")
    path = tmp_path / "a.act"
    save_activations(m, path)
    back = load_activations(path)
    exact = back.values.tobytes() == values.tobytes() and back.layer_id == "relu3"
    raw = path.read_bytes()

    def code_of(blob):
        p = tmp_path / "bad.act"
        p.write_bytes(blob)
        try:
            load_activations(p)
        except ActivationFileError as e:
            return e.code
        return None

    magic = code_of(b"XXXX" + raw[4:])
    # header claims one row fewer than the payload holds
    length = code_of(raw[:5] + struct.pack("<I", 36) + raw[9:])
    flipped = bytearray(raw)
    flipped[40] ^= 0xFF
    crc = code_of(bytes(flipped))
    codes = (magic, length, crc)
    ok = exact and codes == ("bad_magic", "length_mismatch", "checksum_mismatch")
    check(11, ok, f"round trip bit-exact: {exact}; corruption codes {codes}")
