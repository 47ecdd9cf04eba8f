import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domainshift.data import SynthConfig, map_dataset, synth_benchmark, write_image
from domainshift.errors import ConfigError, ReportError
from domainshift.experiment import (
    CellResult,
    ExperimentConfig,
    ReportBundle,
    correlation_report,
    run_experiment_grid,
)

TOML = """
out_dir = "out"
train_manifest = "synth/manifest.csv"
seeds = [0, 1]
models = ["simple_cnn"]
transforms = ["original", "stain_norm"]
stain_reference = "reference.png"

[split]
fractions = [0.5, 0.25, 0.25]
seed = 0

[train]
epochs = 1
batch_size = 16
optimizer = "adam"
learning_rate = 0.001

[test_domains]
same = "held_out"
hue40 = { hue_shift_deg = 40.0 }
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("grid")
    ds = synth_benchmark(SynthConfig(n_patches=48, img_size=32, n_slides=8), root / "synth")
    write_image(root / "reference.png", ds.load_images()[1])
    (root / "exp.toml").write_text(TOML)
    return root


@pytest.fixture(scope="module")
def bundle(workspace):
    return run_experiment_grid(ExperimentConfig.from_file(workspace / "exp.toml"))


def test_layout_and_cells(workspace, bundle):
    out = workspace / "out"
    for transform in ("original", "stain_norm"):
        for seed in (0, 1):
            job = out / "simple_cnn" / transform / str(seed)
            names = {p.name for p in job.iterdir()}
            assert {"checkpoint", "history.csv", "ref.act", "same.act", "hue40.act", "metrics.json"} <= names
    keys = sorted(c.key for c in bundle.cells)
    assert keys == sorted((m, t, d) for m in ["simple_cnn"] for t in ["original", "stain_norm"] for d in ["same", "hue40"])
    assert bundle.failures == []
    for c in bundle.cells:
        assert c.seeds == [0, 1] and len(c.accuracy) == len(c.repshift) == 2
        assert c.accuracy_std is not None and c.repshift_std is not None
        assert c.n_ref[0] > 0 and c.n_target[0] > 0


def test_reference_is_validation_split(workspace, bundle):
    m = json.loads((workspace / "out/simple_cnn/original/0/metrics.json").read_text())
    assert m["n_ref"] == bundle.provenance["split"]["val"]
    assert m["n_target"]["same"] == bundle.provenance["split"]["test"]


def test_provenance_checksums(workspace, bundle):
    out = workspace / "out"
    files = bundle.provenance["files"]
    written = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != "bundle.json"}
    assert written <= set(files)
    for rel, digest in files.items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest
    assert bundle.provenance["seeds"] == [0, 1]


def test_bundle_roundtrip_and_aggregation(workspace, bundle):
    loaded = ReportBundle.load(workspace / "out" / "bundle.json")
    assert [c.to_dict() for c in loaded.cells] == [c.to_dict() for c in bundle.cells]
    for c in loaded.cells:
        assert c.accuracy_mean == pytest.approx(sum(c.accuracy) / len(c.accuracy), rel=1e-12)
        assert c.repshift_mean == pytest.approx(sum(c.repshift) / len(c.repshift), rel=1e-12)


def test_rerun_is_identical(workspace, bundle, tmp_path):
    cfg = ExperimentConfig.from_file(workspace / "exp.toml")
    from dataclasses import replace

    again = run_experiment_grid(replace(cfg, out_dir=tmp_path / "again"))
    assert [c.to_dict() for c in again.cells] == [c.to_dict() for c in bundle.cells]


def test_resume_reuses_jobs(workspace, bundle, monkeypatch):
    import domainshift.experiment as ex

    def boom(*a, **k):
        raise AssertionError("retrained")

    monkeypatch.setattr(ex, "train", boom)
    again = run_experiment_grid(ExperimentConfig.from_file(workspace / "exp.toml"), resume=True)
    assert [c.to_dict() for c in again.cells] == [c.to_dict() for c in bundle.cells]


def test_minimal_grid_and_failed_cell_recorded(workspace, tmp_path):
    from domainshift.data import load_manifest

    base = load_manifest(workspace / "synth" / "manifest.csv")
    big = map_dataset(base.subset(base.records[:6]), lambda im: np.kron(im, np.ones((2, 2, 1), np.uint8)), tmp_path / "big")
    cfg = ExperimentConfig.from_dict(
        dict(
            train_manifest=str(workspace / "synth" / "manifest.csv"),
            seeds=[0],
            split=dict(fractions=[0.5, 0.25, 0.25]),
            train=dict(epochs=1, batch_size=16),
            test_domains=dict(same="held_out", wrong_size=str(tmp_path / "big" / "manifest.csv")),
            out_dir=str(tmp_path / "out"),
        )
    )
    b = run_experiment_grid(cfg)
    assert [c.key for c in b.cells] == [("simple_cnn", "original", "same")]
    c = b.cells[0]
    assert c.accuracy_std is None and c.repshift_std is None
    assert len(b.failures) == 1 and b.failures[0]["domain"] == "wrong_size"


def test_failed_transform_does_not_abort_siblings(workspace, tmp_path):
    cfg = ExperimentConfig.from_dict(
        dict(
            train_manifest=str(workspace / "synth" / "manifest.csv"),
            seeds=[0],
            transforms=["original", dict(name="gan", kind="pretranslated", root=str(tmp_path / "missing"))],
            split=dict(fractions=[0.5, 0.25, 0.25]),
            train=dict(epochs=1),
            test_domains=dict(same="held_out"),
            out_dir=str(tmp_path / "out"),
        )
    )
    b = run_experiment_grid(cfg)
    assert [c.transform for c in b.cells] == ["original"]
    assert b.failures[0]["transform"] == "gan"


def test_pretranslated_directory(workspace, tmp_path):
    from domainshift.data import load_manifest

    base = load_manifest(workspace / "synth" / "manifest.csv")
    swap = lambda im: im[..., ::-1].copy()  # noqa: E731
    map_dataset(base, swap, tmp_path / "gan" / "train")
    map_dataset(base, swap, tmp_path / "gan" / "same")
    cfg = ExperimentConfig.from_dict(
        dict(
            train_manifest=str(workspace / "synth" / "manifest.csv"),
            seeds=[0],
            transforms=[dict(name="gan", kind="pretranslated", root=str(tmp_path / "gan"))],
            split=dict(fractions=[0.5, 0.25, 0.25]),
            train=dict(epochs=1),
            test_domains=dict(same="held_out"),
            out_dir=str(tmp_path / "out"),
        )
    )
    b = run_experiment_grid(cfg)
    assert b.failures == [] and b.cells[0].transform == "gan"


def test_config_validation(workspace):
    base = dict(train_manifest="m.csv", test_domains=dict(same="held_out"))
    ExperimentConfig.from_dict(base)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "test_domains": {}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "seeds": []})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "models": ["resnet"]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "transforms": ["stain_norm"]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "train": {"epoch": 3}})
    cfg = ExperimentConfig.from_dict(base, "/data")
    assert cfg.train_manifest == Path("/data/m.csv") and cfg.seeds == (0, 1, 2)


# ---------------------------------------------------------------------------
# correlation report
# ---------------------------------------------------------------------------


def _bundle(points, seeds=(0,)):
    cells = [
        CellResult("m", "t", f"d{k}", list(seeds), [acc] * len(seeds), [r] * len(seeds), [1] * len(seeds), [1] * len(seeds))
        for k, (r, acc) in enumerate(points)
    ]
    return ReportBundle(cells)


def test_exact_line(tmp_path):
    rs = [0.0, 0.1, 0.25, 0.4, 0.7]
    rep = correlation_report(_bundle([(r, -r + 0.9) for r in rs]), tmp_path)
    assert rep["slope"] == pytest.approx(-1.0, abs=1e-9)
    assert rep["intercept"] == pytest.approx(0.9, abs=1e-9)
    assert rep["pearson_r"] == pytest.approx(-1.0, abs=1e-9)
    assert (tmp_path / "correlation.svg").read_text().lstrip().startswith("<?xml")
    lines = (tmp_path / "correlation.csv").read_text().splitlines()
    assert lines[0] == "model,transform,domain,repshift,accuracy" and len(lines) == 6


def test_report_errors():
    with pytest.raises(ReportError) as e:
        correlation_report(_bundle([(0.1, 0.5), (0.2, 0.4)]))
    assert e.value.code == "too_few_points"
    with pytest.raises(ReportError) as e:
        correlation_report(_bundle([(0.1, 0.5), (0.1, 0.4), (0.1, 0.3)]))
    assert e.value.code == "zero_variance"


def test_per_seed_values():
    cells = [CellResult("m", "t", f"d{k}", [0, 1], [0.9 - k * 0.1, 0.5], [k * 0.1, 0.5 + k * 0.2], [1, 1], [1, 1])
             for k in range(4)]
    b = ReportBundle(cells)
    assert correlation_report(b, seed=0)["pearson_r"] == pytest.approx(-1.0)
    assert np.isnan(correlation_report(b, seed=1)["pearson_r"])
    assert correlation_report(b)["n_points"] == 4


points_st = st.lists(
    st.tuples(st.floats(0, 1, allow_nan=False), st.floats(0, 1, allow_nan=False)), min_size=3, max_size=12
)


@settings(max_examples=60, deadline=None)
@given(points_st, st.randoms(use_true_random=False))
def test_report_invariant_to_ordering_and_bounded(points, rnd):
    rs = [p[0] for p in points]
    if max(rs) - min(rs) < 1e-6:
        return
    a = correlation_report(_bundle(points))
    shuffled = list(points)
    rnd.shuffle(shuffled)
    bundle = _bundle(shuffled)
    rnd.shuffle(bundle.cells)
    b = correlation_report(bundle)
    if np.isnan(a["pearson_r"]):
        assert np.isnan(b["pearson_r"])
        return
    assert -1.0 <= a["pearson_r"] <= 1.0
    for k in ("pearson_r", "slope", "intercept"):
        assert a[k] == pytest.approx(b[k], rel=1e-9, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=10, unique=True),
    st.floats(-3, 3).filter(lambda s: abs(s) > 1e-2),
    st.floats(-2, 2),
)
def test_collinear_points_give_unit_correlation(xs, slope, intercept):
    if np.ptp(xs) < 1e-3:
        return
    rep = correlation_report(_bundle([(x, slope * x + intercept) for x in xs]))
    assert rep["pearson_r"] == pytest.approx(np.sign(slope), abs=1e-9)
    assert rep["slope"] == pytest.approx(slope, rel=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=3, max_size=8))
def test_unit_correlation_only_if_collinear(points):
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    rep = correlation_report(_bundle(points))
    residual = y - (rep["intercept"] + rep["slope"] * x)
    if abs(abs(rep["pearson_r"]) - 1) < 1e-12:
        assert np.max(np.abs(residual)) < 1e-5
    if np.max(np.abs(residual)) > 1e-3:
        assert abs(rep["pearson_r"]) < 1
