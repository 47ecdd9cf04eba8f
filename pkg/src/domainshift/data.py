"""Patch manifests, slide-level splits and the synthetic two-domain benchmark.

A manifest is a UTF-8 CSV with header ``path,label,slide_id,domain_id``;
paths are relative to the directory containing the manifest.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ManifestError, SplitError
from .transforms import REFERENCE_HE, color_cast, od_to_rgb

__all__ = [
    "LABELS",
    "MANIFEST_HEADER",
    "PatchRecord",
    "PatchDataset",
    "SplitSpec",
    "load_manifest",
    "write_manifest",
    "split_by_slide",
    "ClassTexture",
    "SynthConfig",
    "synth_benchmark",
    "cast_dataset",
    "map_dataset",
    "read_image",
    "write_image",
]

LABELS = ("non_tumor", "tumor")
MANIFEST_HEADER = ["path", "label", "slide_id", "domain_id"]


def read_image(path) -> np.ndarray:
    """Read an 8-bit RGB image. Every dataset image load goes through here."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path, image) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


@dataclass(frozen=True)
class PatchRecord:
    path: str
    label: str
    slide_id: str
    domain_id: str

    def __post_init__(self):
        if not self.path:
            raise ManifestError("empty path")
        if self.label not in LABELS:
            raise ManifestError(f"unknown label {self.label!r}", code="unknown_label")
        if not self.slide_id or not self.domain_id:
            raise ManifestError(f"empty slide_id/domain_id for {self.path!r}")

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)


@dataclass
class PatchDataset:
    root: Path
    records: list[PatchRecord]
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label_index for r in self.records], dtype=np.int64)

    @property
    def slide_ids(self) -> set[str]:
        return {r.slide_id for r in self.records}

    @property
    def domain_ids(self) -> list[str]:
        return [r.domain_id for r in self.records]

    def image_path(self, record: PatchRecord) -> Path:
        return Path(self.root) / record.path

    def load_images(self) -> np.ndarray:
        """All images stacked as ``(n, H, W, 3)`` uint8, in record order."""
        if not self.records:
            return np.zeros((0, 0, 0, 3), dtype=np.uint8)
        return np.stack([read_image(self.image_path(r)) for r in self.records])

    def subset(self, records: Sequence[PatchRecord], name: str | None = None) -> "PatchDataset":
        return PatchDataset(self.root, list(records), name or self.name)


def load_manifest(manifest_path, check_files: bool = True) -> PatchDataset:
    path = Path(manifest_path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}", code="missing_manifest")
    root = path.parent.resolve()
    records: list[PatchRecord] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected 4 columns, got {len(row)}", code="malformed_row")
            try:
                rec = PatchRecord(*row)
            except ManifestError as e:
                raise type(e)(f"{path}:{lineno}: {e}", code=e.code) from None
            if rec.path in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {rec.path!r}", code="duplicate_path")
            seen.add(rec.path)
            if check_files:
                full = (root / rec.path).resolve()
                if root not in full.parents or not full.is_file():
                    raise ManifestError(f"{path}:{lineno}: {rec.path!r} does not resolve to a file under {root}", code="missing_image")
            records.append(rec)
    return PatchDataset(root, records, path.stem)


def write_manifest(ds: PatchDataset, manifest_path) -> Path:
    """Write ``ds`` as a manifest. Paths are rewritten relative to the
    manifest's directory."""
    path = Path(manifest_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in ds.records:
            full = (Path(ds.root) / r.path).resolve()
            rel = Path(full).relative_to(base) if base in full.parents else Path(r.path)
            w.writerow([rel.as_posix(), r.label, r.slide_id, r.domain_id])
    return path


# ---------------------------------------------------------------------------
# Slide-level splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(x) for x in self.fractions)
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise SplitError(f"fractions must be 3 non-negative values summing to 1, got {fr}")
        object.__setattr__(self, "fractions", fr)


def split_by_slide(ds: PatchDataset, spec: SplitSpec) -> tuple[PatchDataset, PatchDataset, PatchDataset]:
    """Partition ``ds`` into train/val/test with disjoint slide sets.

    Slides are shuffled with ``spec.seed`` and assigned in order, filling
    each non-empty split up to its fraction of the patch count before moving
    on. Every non-empty split receives at least one slide.
    """
    counts: dict[str, int] = {}
    for r in ds.records:
        counts[r.slide_id] = counts.get(r.slide_id, 0) + 1
    slides = sorted(counts)
    nonempty = [k for k, f in enumerate(spec.fractions) if f > 0]
    if len(slides) < len(nonempty):
        raise SplitError(f"{len(slides)} slides cannot fill {len(nonempty)} non-empty splits")

    order = [slides[i] for i in np.random.default_rng(spec.seed).permutation(len(slides))]
    targets = [f * len(ds) for f in spec.fractions]
    filled = [0, 0, 0]
    n_slides = [0, 0, 0]
    assign: dict[str, int] = {}
    pos = 0
    last = len(nonempty) - 1
    for i, slide in enumerate(order):
        remaining = len(order) - i
        while pos < last and n_slides[nonempty[pos]] > 0 and (
            filled[nonempty[pos]] >= targets[nonempty[pos]] or remaining <= last - pos
        ):
            pos += 1
        k = nonempty[pos]
        assign[slide] = k
        filled[k] += counts[slide]
        n_slides[k] += 1

    parts: list[list[PatchRecord]] = [[], [], []]
    for r in ds.records:
        parts[assign[r.slide_id]].append(r)
    names = ("train", "val", "test")
    return tuple(ds.subset(p, f"{ds.name}_{n}") for p, n in zip(parts, names))  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassTexture:
    """Nuclei statistics for one class. Counts are Poisson means per
    96x96 area and scale with image area."""

    nuclei_per_patch: float
    radius_min: float
    radius_max: float
    intensity: float = 1.0


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic H&E-like benchmark.

    Class is encoded only in nuclei density and size; the domain is encoded
    only in a global color cast (hue rotation, contrast scale) applied after
    rendering. Config file keys: ``n_patches``, ``img_size``, ``n_slides``,
    ``hue_shift_deg``, ``contrast_scale``, ``seed``, ``domain_id``.
    """

    n_patches: int = 2000
    img_size: int = 96
    n_slides: int = 20
    hue_shift_deg: float = 0.0
    contrast_scale: float = 1.0
    seed: int = 0
    domain_id: str | None = None
    tumor: ClassTexture = ClassTexture(26.0, 4.0, 6.5, 1.15)
    non_tumor: ClassTexture = ClassTexture(11.0, 2.2, 3.8, 0.9)
    noise_od: float = 0.01

    def __post_init__(self):
        if self.n_patches < 1:
            raise ConfigError("n_patches must be >= 1")
        if self.img_size < 8 or self.n_slides < 1:
            raise ConfigError("img_size must be >= 8 and n_slides >= 1")
        if self.contrast_scale <= 0:
            raise ConfigError("contrast_scale must be positive")

    @property
    def resolved_domain_id(self) -> str:
        if self.domain_id:
            return self.domain_id
        return _domain_name(self.hue_shift_deg, self.contrast_scale)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("tumor", "non_tumor"):
            if isinstance(d.get(key), dict):
                d[key] = ClassTexture(**d[key])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad synth config: {e}") from None


def _domain_name(hue: float, contrast: float) -> str:
    name = f"hue{hue:+g}"
    if contrast != 1.0:
        name += f"_c{contrast:g}"
    return name


def _smooth_noise(rng, size, sigma):
    z = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return z / (z.std() + 1e-12)


def _render_concentrations(rng, size, tex: ClassTexture, slide_gain: float):
    """Hematoxylin and eosin concentration maps for one patch."""
    area = (size / 96.0) ** 2
    n = rng.poisson(tex.nuclei_per_patch * area)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    hema = np.zeros((size, size))
    for _ in range(n):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(tex.radius_min, tex.radius_max)
        ecc = rng.uniform(0.7, 1.0)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ecc
        d = np.sqrt(u * u + v * v)
        amp = tex.intensity * rng.uniform(0.8, 1.2)
        hema = np.maximum(hema, amp / (1.0 + np.exp((d - r) / 0.7)))
    hema *= 1.0 + 0.15 * _smooth_noise(rng, size, 1.0)

    eosin = 0.35 + 0.12 * _smooth_noise(rng, size, 3.0)
    # Sparse gaps of unstained background.
    gaps = _smooth_noise(rng, size, 6.0) < -1.3
    eosin[gaps] = 0.0
    hema[gaps] *= 0.2
    return np.clip(hema * slide_gain, 0, None), np.clip(eosin * slide_gain, 0, None)


def render_patch(cfg: SynthConfig, index: int, apply_cast: bool = True) -> tuple[np.ndarray, str, str]:
    """Render patch ``index``; returns ``(image, label, slide_id)``.

    The structure depends only on ``(cfg.seed, index)`` and the class
    texture parameters, never on the color cast.
    """
    label = LABELS[index % 2]
    slide = (index // 2) % cfg.n_slides
    slide_rng = np.random.default_rng([cfg.seed, 1, slide])
    slide_gain = slide_rng.uniform(0.9, 1.1)
    rng = np.random.default_rng([cfg.seed, 0, index])
    tex = cfg.tumor if label == "tumor" else cfg.non_tumor
    hema, eosin = _render_concentrations(rng, cfg.img_size, tex, slide_gain)
    od = hema[..., None] * REFERENCE_HE[:, 0] + eosin[..., None] * REFERENCE_HE[:, 1]
    od = od + cfg.noise_od * rng.standard_normal(od.shape)
    image = od_to_rgb(np.clip(od, 0, None))
    if apply_cast:
        image = color_cast(image, cfg.hue_shift_deg, cfg.contrast_scale)
    return image, label, f"slide{slide:03d}"


def synth_benchmark(config: SynthConfig, out_dir, seed: int | None = None, apply_cast: bool = True) -> PatchDataset:
    """Write a synthetic benchmark under ``out_dir`` and return its dataset.

    Produces ``images/*.png``, ``manifest.csv`` and ``synth.json`` (the
    generator parameters, including the class-conditional texture settings).
    ``apply_cast=False`` renders the pre-cast images of the same domain.
    """
    if seed is not None:
        config = replace(config, seed=seed)
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from None
    domain = config.resolved_domain_id
    records = []
    for i in range(config.n_patches):
        image, label, slide = render_patch(config, i, apply_cast=apply_cast)
        rel = f"images/{i:05d}.png"
        write_image(out / rel, image)
        records.append(PatchRecord(rel, label, slide, domain))
    ds = PatchDataset(out.resolve(), records, out.name)
    write_manifest(ds, out / "manifest.csv")
    meta = asdict(config)
    meta.update(domain_id=domain, apply_cast=apply_cast)
    (out / "synth.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return ds


def map_dataset(ds: PatchDataset, fn, out_dir, domain_id: str | None = None, name: str | None = None) -> PatchDataset:
    """Apply ``fn(image) -> image`` to every patch, writing a new manifest
    under ``out_dir`` with the same relative layout."""
    out = Path(out_dir)
    records = []
    for r in ds.records:
        target = out / r.path
        target.parent.mkdir(parents=True, exist_ok=True)
        write_image(target, fn(read_image(ds.image_path(r))))
        records.append(replace(r, domain_id=domain_id or r.domain_id))
    new = PatchDataset(out.resolve(), records, name or out.name)
    write_manifest(new, out / "manifest.csv")
    return new


def cast_dataset(ds: PatchDataset, hue_shift_deg: float, contrast_scale: float, out_dir, domain_id: str | None = None) -> PatchDataset:
    """Re-render ``ds`` under a global color cast as a new domain."""
    domain = domain_id or _domain_name(hue_shift_deg, contrast_scale)
    return map_dataset(ds, lambda im: color_cast(im, hue_shift_deg, contrast_scale), out_dir, domain, domain)
