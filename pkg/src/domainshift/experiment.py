"""Experiment grid (accuracy and representation shift per model, transform,
test domain and seed) and the shift-versus-accuracy correlation report.

A grid is described by a TOML file; see :data:`CONFIG_SCHEMA`. Results are
written under ``out_dir`` as::

    out_dir/<model>/<transform>/<seed>/{checkpoint, history.csv, *.act, metrics.json}
    out_dir/bundle.json
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .data import PatchDataset, SplitSpec, cast_dataset, load_manifest, map_dataset, read_image, split_by_slide
from .errors import ConfigError, DomainShiftError, ReportError, StainError
from .models import ARCHS, ModelSpec, TrainConfig, build_model, evaluate_accuracy, save_checkpoint, train, write_history
from .repshift import extract_mean_activations, representation_shift, save_activations
from .transforms import GeoAugConfig, HsvJitterConfig, StainProfile, estimate_stain_profile, stain_normalize

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

__all__ = [
    "CONFIG_SCHEMA",
    "TestDomain",
    "TransformVariant",
    "ExperimentConfig",
    "CellResult",
    "ReportBundle",
    "run_experiment_grid",
    "correlation_report",
]

CONFIG_SCHEMA = {
    "out_dir": "str. Output directory (relative to the config file). The CLI --out flag overrides it.",
    "train_manifest": "str, required. Manifest of the training domain; split by slide into train/val/test.",
    "seeds": "list[int], default [0, 1, 2]. One training session per seed.",
    "models": "list[str], default ['simple_cnn']. Any of: simple_cnn, mini_googlenet.",
    "transforms": (
        "list, default ['original']. Entries: 'original', 'color_aug', 'stain_norm', or a table "
        "{name = str, kind = 'pretranslated', root = str} whose root holds train/<path> for every training "
        "manifest record and <domain>/<path> for every test-domain record."
    ),
    "stain_reference": "str. Reference patch (PNG) for stain_norm.",
    "workers": "int, default 1. Parallel (model, transform, seed) jobs; results are deterministic only with 1.",
    "layer": "str, default 'last_conv'. Layer tag or module name for activations.",
    "standardize": "bool, default false. z-score each filter by reference statistics before the distance.",
    "split": "table {fractions = [train, val, test], seed = int}, default fractions [0.7, 0.15, 0.15], seed 0.",
    "test_domains": (
        "table, required, name -> 'held_out' (the same-domain test split) | manifest path | "
        "{hue_shift_deg = float, contrast_scale = float} (color cast of the held-out test split)."
    ),
    "model": "table of ModelSpec options other than arch: input_size, n_classes, dropout_rate, width_mult.",
    "train": "table of TrainConfig options: epochs, batch_size, learning_rate, momentum, weight_decay, optimizer, patience.",
    "augment": "table {geo = GeoAugConfig options, hsv = HsvJitterConfig options}. hsv applies to color_aug only.",
}


@dataclass(frozen=True)
class TestDomain:
    name: str
    manifest: Path | None = None
    hue_shift_deg: float | None = None
    contrast_scale: float = 1.0

    @property
    def kind(self) -> str:
        if self.manifest is not None:
            return "manifest"
        return "cast" if self.hue_shift_deg is not None else "held_out"


@dataclass(frozen=True)
class TransformVariant:
    name: str
    kind: str  # original | color_aug | stain_norm | pretranslated
    root: Path | None = None


@dataclass
class ExperimentConfig:
    train_manifest: Path
    test_domains: tuple[TestDomain, ...]
    out_dir: Path = Path("out")
    models: tuple[str, ...] = ("simple_cnn",)
    transforms: tuple[TransformVariant, ...] = (TransformVariant("original", "original"),)
    seeds: tuple[int, ...] = (0, 1, 2)
    split: SplitSpec = SplitSpec((0.7, 0.15, 0.15), 0)
    stain_reference: Path | None = None
    model_options: dict = field(default_factory=dict)
    train: TrainConfig = TrainConfig()
    geo: GeoAugConfig = GeoAugConfig(pad=4)
    hsv: HsvJitterConfig = HsvJitterConfig()
    layer: str = "last_conv"
    standardize: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.test_domains:
            raise ConfigError("at least one test domain is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for m in self.models:
            if m not in ARCHS:
                raise ConfigError(f"unknown model {m!r}")
        names = [t.name for t in self.transforms]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate transform names: {names}")
        if any(t.kind == "stain_norm" for t in self.transforms) and self.stain_reference is None:
            raise ConfigError("stain_norm requires stain_reference")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        base = Path(base_dir)
        unknown = set(d) - set(CONFIG_SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "train_manifest" not in d or "test_domains" not in d:
            raise ConfigError("config needs train_manifest and test_domains")

        def path(p):
            return None if p is None else (base / p)

        domains = []
        for name, spec in d["test_domains"].items():
            if spec == "held_out":
                domains.append(TestDomain(name))
            elif isinstance(spec, str):
                domains.append(TestDomain(name, manifest=path(spec)))
            elif isinstance(spec, dict):
                domains.append(TestDomain(name, hue_shift_deg=float(spec.get("hue_shift_deg", 0.0)),
                                          contrast_scale=float(spec.get("contrast_scale", 1.0))))
            else:
                raise ConfigError(f"bad test domain {name!r}: {spec!r}")

        variants = []
        for t in d.get("transforms", ["original"]):
            if isinstance(t, str):
                if t not in ("original", "color_aug", "stain_norm"):
                    raise ConfigError(f"unknown transform {t!r}")
                variants.append(TransformVariant(t, t))
            elif isinstance(t, dict) and t.get("kind") == "pretranslated" and "root" in t:
                variants.append(TransformVariant(t.get("name", "pretranslated"), "pretranslated", path(t["root"])))
            else:
                raise ConfigError(f"bad transform entry {t!r}")

        split = d.get("split", {})
        augment = d.get("augment", {})
        try:
            train_cfg = TrainConfig(**d.get("train", {}))
            geo = GeoAugConfig(**{**dict(pad=4), **augment.get("geo", {})})
            hsv = HsvJitterConfig(**augment.get("hsv", {}))
            ModelSpec(**d.get("model", {}))
        except TypeError as e:
            raise ConfigError(f"bad option: {e}") from None
        return cls(
            train_manifest=path(d["train_manifest"]),
            test_domains=tuple(domains),
            out_dir=path(d.get("out_dir", "out")),
            models=tuple(d.get("models", ["simple_cnn"])),
            transforms=tuple(variants),
            seeds=tuple(int(s) for s in d.get("seeds", [0, 1, 2])),
            split=SplitSpec(tuple(split.get("fractions", (0.7, 0.15, 0.15))), int(split.get("seed", 0))),
            stain_reference=path(d.get("stain_reference")),
            model_options=dict(d.get("model", {})),
            train=train_cfg,
            geo=geo,
            hsv=hsv,
            layer=d.get("layer", "last_conv"),
            standardize=bool(d.get("standardize", False)),
            workers=int(d.get("workers", 1)),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = tomllib.loads(path.read_text())
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(d, path.parent)

    def to_dict(self) -> dict:
        """JSON-serializable view; used for provenance and cache keys."""
        def conv(x):
            if isinstance(x, Path):
                return str(x)
            if isinstance(x, dict):
                return {k: conv(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [conv(v) for v in x]
            return x
        d = asdict(self)
        d["train"]["augmentation"] = []
        return conv(d)


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    model: str
    transform: str
    domain: str
    seeds: list[int] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    repshift: list[float] = field(default_factory=list)
    n_ref: list[int] = field(default_factory=list)
    n_target: list[int] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.model, self.transform, self.domain)

    @staticmethod
    def _std(values):
        return float(np.std(values, ddof=1)) if len(values) >= 2 else None

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def repshift_mean(self) -> float:
        return float(np.mean(self.repshift))

    @property
    def accuracy_std(self):
        return self._std(self.accuracy)

    @property
    def repshift_std(self):
        return self._std(self.repshift)

    def value(self, seed=None) -> tuple[float, float]:
        """``(repshift, accuracy)``: seed means, or the given seed's values."""
        if seed is None:
            return self.repshift_mean, self.accuracy_mean
        k = self.seeds.index(seed)
        return self.repshift[k], self.accuracy[k]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(accuracy_mean=self.accuracy_mean, accuracy_std=self.accuracy_std,
                 repshift_mean=self.repshift_mean, repshift_std=self.repshift_std)
        return d


@dataclass
class ReportBundle:
    cells: list[CellResult]
    failures: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def cell(self, model, transform, domain) -> CellResult:
        for c in self.cells:
            if c.key == (model, transform, domain):
                return c
        raise KeyError((model, transform, domain))

    def to_dict(self) -> dict:
        return dict(cells=[c.to_dict() for c in self.cells], failures=self.failures, provenance=self.provenance)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ReportBundle":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, ValueError) as e:
            raise ReportError(f"cannot read bundle {path}: {e}") from None
        fields = ("model", "transform", "domain", "seeds", "accuracy", "repshift", "n_ref", "n_target")
        cells = [CellResult(**{k: c[k] for k in fields}) for c in d["cells"]]
        return cls(cells, d.get("failures", []), d.get("provenance", {}))


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d.pop("out_dir", None)
    d.pop("workers", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _materialize_domains(cfg: ExperimentConfig, test_split: PatchDataset) -> dict[str, PatchDataset]:
    out = {}
    for dom in cfg.test_domains:
        if dom.kind == "held_out":
            out[dom.name] = test_split.subset(test_split.records, dom.name)
        elif dom.kind == "manifest":
            out[dom.name] = load_manifest(dom.manifest)
            out[dom.name].name = dom.name
        else:
            target = cfg.out_dir / "domains" / dom.name
            if (target / "manifest.csv").is_file():
                ds = load_manifest(target / "manifest.csv")
                if [r.path for r in ds.records] == [r.path for r in test_split.records]:
                    out[dom.name] = ds
                    continue
            out[dom.name] = cast_dataset(test_split, dom.hue_shift_deg, dom.contrast_scale, target, dom.name)
    return out


def _stain_normalized(ds: PatchDataset, profile: StainProfile, target_dir: Path, counter: dict) -> PatchDataset:
    def fn(image):
        try:
            return stain_normalize(image, profile)
        except StainError:
            counter["skipped"] = counter.get("skipped", 0) + 1
            return image

    manifest = target_dir / "manifest.csv"
    if manifest.is_file():
        cached = load_manifest(manifest)
        if [r.path for r in cached.records] == [r.path for r in ds.records]:
            cached.name = ds.name
            return cached
    return map_dataset(ds, fn, target_dir, name=ds.name)


def _rebased(ds: PatchDataset, root: Path) -> PatchDataset:
    missing = [r.path for r in ds.records if not (root / r.path).is_file()]
    if missing:
        raise ConfigError(f"pretranslated root {root} lacks {len(missing)} images, e.g. {missing[0]}")
    return PatchDataset(root.resolve(), list(ds.records), ds.name)


def _prepare_variant(cfg: ExperimentConfig, variant: TransformVariant, roles: dict[str, PatchDataset]) -> tuple[dict, dict]:
    """Datasets as seen by models under ``variant``, plus notes for provenance."""
    notes: dict[str, Any] = {}
    if variant.kind in ("original", "color_aug"):
        return dict(roles), notes
    if variant.kind == "stain_norm":
        profile = estimate_stain_profile(read_image(cfg.stain_reference))
        notes["reference_profile"] = profile.to_dict()
        counter: dict = {}
        base = cfg.out_dir / "prepared" / variant.name
        out = {role: _stain_normalized(ds, profile, base / role, counter) for role, ds in roles.items()}
        notes["unnormalized_patches"] = counter.get("skipped", 0)
        return out, notes
    if variant.kind == "pretranslated":
        out = {}
        for role, ds in roles.items():
            sub = "train" if role in ("train", "val") else role
            out[role] = _rebased(ds, variant.root / sub)
        return out, notes
    raise ConfigError(f"unknown transform kind {variant.kind!r}")


def _run_job(cfg: ExperimentConfig, variant: TransformVariant, arch: str, seed: int,
             datasets: dict[str, PatchDataset], images: dict[str, np.ndarray] | None, resume: bool) -> dict:
    """Train one model and score it on every test domain; writes the job
    directory and returns its metrics."""
    job_dir = cfg.out_dir / arch / variant.name / str(seed)
    metrics_path = job_dir / "metrics.json"
    chash = _config_hash(cfg)
    if resume and metrics_path.is_file():
        prev = json.loads(metrics_path.read_text())
        if prev.get("config_sha256") == chash:
            return prev
    job_dir.mkdir(parents=True, exist_ok=True)
    images = images if images is not None else {}

    def imgs(role):
        if role not in images:
            images[role] = datasets[role].load_images()
        return images[role]

    pipeline = (cfg.hsv, cfg.geo) if variant.kind == "color_aug" else (cfg.geo,)
    train_cfg = replace(cfg.train, seed=seed, augmentation=pipeline)
    spec = ModelSpec(arch=arch, init_seed=seed, **cfg.model_options)
    metrics: dict[str, Any] = dict(model=arch, transform=variant.name, seed=seed, config_sha256=chash,
                                   accuracy={}, repshift={}, n_target={}, errors={})
    model, history = train(build_model(spec), datasets["train"], datasets["val"], train_cfg, imgs("train"), imgs("val"))
    save_checkpoint(model, job_dir / "checkpoint")
    write_history(history, job_dir / "history.csv")
    metrics["training_meta"] = model.training_meta
    metrics["fingerprint"] = model.fingerprint()

    ref = extract_mean_activations(model, datasets["val"], cfg.layer, images=imgs("val"))
    save_activations(ref, job_dir / "ref.act")
    metrics["n_ref"] = ref.n
    for dom in cfg.test_domains:
        try:
            ds = datasets[dom.name]
            acc = evaluate_accuracy(model, ds, images=imgs(dom.name))
            act = extract_mean_activations(model, ds, cfg.layer, images=imgs(dom.name))
            save_activations(act, job_dir / f"{dom.name}.act")
            res = representation_shift(ref, act, standardize=cfg.standardize)
            metrics["accuracy"][dom.name] = acc.overall
            metrics["repshift"][dom.name] = res.mean_shift
            metrics["n_target"][dom.name] = act.n
        except Exception as e:  # recorded, siblings continue
            log.exception("cell %s/%s/%s/%s failed", arch, variant.name, seed, dom.name)
            metrics["errors"][dom.name] = f"{type(e).__name__}: {e}"
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return metrics


def _job_entry(args):
    cfg, variant, arch, seed, datasets, resume = args
    try:
        return _run_job(cfg, variant, arch, seed, datasets, None, resume)
    except Exception as e:
        return dict(model=arch, transform=variant.name, seed=seed, fatal=f"{type(e).__name__}: {e}")


def run_experiment_grid(cfg: ExperimentConfig, resume: bool = False) -> ReportBundle:
    """Run every (model, transform, seed) job and aggregate per
    (model, transform, test domain) cell. Writes ``bundle.json``.

    Reference activations come from the validation split (held out from
    training). Failed jobs or cells are listed in ``bundle.failures``.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = load_manifest(cfg.train_manifest)
    train_ds, val_ds, test_ds = split_by_slide(base, cfg.split)
    if not len(train_ds) or not len(val_ds):
        raise ConfigError("split must leave non-empty train and val sets")
    if "input_size" not in cfg.model_options:
        size = read_image(train_ds.image_path(train_ds.records[0])).shape[0]
        cfg = replace(cfg, model_options={**cfg.model_options, "input_size": size})
    roles = {"train": train_ds, "val": val_ds, **_materialize_domains(cfg, test_ds)}

    results: list[dict] = []
    notes: dict[str, Any] = {}
    failures: list[dict] = []
    for variant in cfg.transforms:
        try:
            datasets, notes[variant.name] = _prepare_variant(cfg, variant, roles)
        except Exception as e:
            log.exception("transform %s failed", variant.name)
            for arch in cfg.models:
                for seed in cfg.seeds:
                    failures.append(dict(model=arch, transform=variant.name, seed=seed, domain=None,
                                         error=f"{type(e).__name__}: {e}"))
            continue
        jobs = [(cfg, variant, arch, seed, datasets, resume) for arch in cfg.models for seed in cfg.seeds]
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                results.extend(pool.map(_job_entry, jobs))
        else:
            images: dict[str, np.ndarray] = {}
            for job in jobs:
                c, v, arch, seed, ds, r = job
                try:
                    results.append(_run_job(c, v, arch, seed, ds, images, r))
                except Exception as e:
                    log.exception("job %s/%s/%s failed", arch, v.name, seed)
                    results.append(dict(model=arch, transform=v.name, seed=seed, fatal=f"{type(e).__name__}: {e}"))

    cells: dict[tuple, CellResult] = {}
    for m in results:
        if "fatal" in m:
            failures.append(dict(model=m["model"], transform=m["transform"], seed=m["seed"], domain=None, error=m["fatal"]))
            continue
        for dom in cfg.test_domains:
            if dom.name not in m["accuracy"]:
                failures.append(dict(model=m["model"], transform=m["transform"], seed=m["seed"], domain=dom.name,
                                     error=m["errors"].get(dom.name, "missing")))
                continue
            key = (m["model"], m["transform"], dom.name)
            cell = cells.setdefault(key, CellResult(*key))
            cell.seeds.append(m["seed"])
            cell.accuracy.append(m["accuracy"][dom.name])
            cell.repshift.append(m["repshift"][dom.name])
            cell.n_ref.append(m["n_ref"])
            cell.n_target.append(m["n_target"][dom.name])

    files = {
        p.relative_to(out).as_posix(): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and not (p.parent == out and (p.name == "bundle.json" or p.stem.startswith("correlation")))
    }
    provenance = dict(
        package_version=__version__,
        config=cfg.to_dict(),
        config_sha256=_config_hash(cfg),
        seeds=list(cfg.seeds),
        split=dict(train=len(train_ds), val=len(val_ds), test=len(test_ds)),
        transform_notes=notes,
        files=files,
    )
    bundle = ReportBundle(list(cells.values()), failures, provenance)
    bundle.save(out / "bundle.json")
    return bundle


# ---------------------------------------------------------------------------
# Correlation report
# ---------------------------------------------------------------------------


def _scatter_svg(points, slope, intercept, r, path):
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "domainshift"
    from matplotlib.figure import Figure

    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    for label in sorted({(p["model"], p["transform"]) for p in points}):
        sel = [p for p in points if (p["model"], p["transform"]) == label]
        ax.scatter([p["repshift"] for p in sel], [p["accuracy"] for p in sel], label="/".join(label))
    xs = np.array([p["repshift"] for p in points])
    grid = np.linspace(xs.min(), xs.max(), 2)
    ax.plot(grid, intercept + slope * grid, "k--", lw=1, label=f"OLS fit, r = {r:.3f}")
    ax.set_xlabel("representation shift")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})


def correlation_report(bundle: ReportBundle, out_dir=None, seed: int | None = None, stem: str = "correlation") -> dict:
    """Regress accuracy on representation shift across cells.

    Uses seed-averaged cell values, or one seed's values if ``seed`` is
    given. With ``out_dir``, writes ``<stem>.svg`` (scatter + OLS line) and
    ``<stem>.csv`` (the points).
    """
    points = []
    for c in sorted(bundle.cells, key=lambda c: c.key):
        if seed is not None and seed not in c.seeds:
            continue
        R, acc = c.value(seed)
        points.append(dict(model=c.model, transform=c.transform, domain=c.domain, repshift=R, accuracy=acc))
    if len(points) < 3:
        raise ReportError(f"need at least 3 cells, got {len(points)}", code="too_few_points")
    x = np.array([p["repshift"] for p in points])
    y = np.array([p["accuracy"] for p in points])
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if np.ptp(x) <= 1e-12 * max(1.0, float(np.abs(x).max())):
        raise ReportError("representation shift has zero variance", code="zero_variance")
    slope = float(dx @ dy) / sxx
    intercept = float(y.mean() - slope * x.mean())
    pearson = float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0)) if syy > 0 else float("nan")
    report = dict(pearson_r=pearson, slope=slope, intercept=intercept, n_points=len(points), seed=seed, points=points)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, svg_path = out / f"{stem}.csv", out / f"{stem}.svg"
        with csv_path.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["model", "transform", "domain", "repshift", "accuracy"], lineterminator="\n")
            w.writeheader()
            w.writerows(points)
        _scatter_svg(points, slope, intercept, pearson, svg_path)
        report.update(plot=str(svg_path), points_csv=str(csv_path))
    return report
