"""Image transforms: optical density math, color casts, HSV jitter,
geometric augmentation and sparse stain separation / normalization.

All functions take and return ``uint8`` RGB arrays of shape ``(H, W, 3)``
unless noted otherwise. Randomized functions take a ``numpy.random.Generator``
and draw a fixed number of values per call, so results depend only on the
input and the generator state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import ConfigError, StainError

__all__ = [
    "rgb_to_od",
    "od_to_rgb",
    "color_cast",
    "HsvJitterConfig",
    "hsv_color_augment",
    "GeoAugConfig",
    "geometric_augment",
    "StainProfile",
    "StainConfig",
    "estimate_stain_profile",
    "stain_concentrations",
    "normalize_od",
    "stain_normalize",
    "REFERENCE_HE",
]

# Ruifrok & Johnston H&E optical density vectors, unit norm.
REFERENCE_HE = np.array(
    [[0.650, 0.072], [0.704, 0.990], [0.286, 0.105]], dtype=np.float64
)
REFERENCE_HE = REFERENCE_HE / np.linalg.norm(REFERENCE_HE, axis=0)


# ---------------------------------------------------------------------------
# Optical density
# ---------------------------------------------------------------------------


def rgb_to_od(image) -> np.ndarray:
    """Optical density ``-log10((I + 1) / 256)``, float64, same shape."""
    image = np.asarray(image, dtype=np.float64)
    return -np.log10((image + 1.0) / 256.0)


def od_to_rgb(od) -> np.ndarray:
    """Inverse of :func:`rgb_to_od`, rounded and clipped to ``uint8``."""
    od = np.asarray(od, dtype=np.float64)
    rgb = 256.0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _to_unit(image) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def _from_unit(image) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def color_cast(image, hue_shift_deg: float = 0.0, contrast_scale: float = 1.0) -> np.ndarray:
    """Deterministic global color cast: rotate hue, then scale contrast
    around the image mean intensity.

    ``color_cast(x, 0, 1)`` returns ``x`` unchanged.
    """
    image = np.asarray(image)
    if hue_shift_deg % 360.0 == 0.0 and contrast_scale == 1.0:
        return image.astype(np.uint8, copy=True)
    rgb = _to_unit(image)
    if hue_shift_deg % 360.0 != 0.0:
        hsv = rgb_to_hsv(rgb)
        hsv[..., 0] = np.mod(hsv[..., 0] + hue_shift_deg / 360.0, 1.0)
        rgb = hsv_to_rgb(hsv)
    if contrast_scale != 1.0:
        mean = rgb.mean()
        rgb = mean + contrast_scale * (rgb - mean)
    return _from_unit(np.clip(rgb, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Color augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HsvJitterConfig:
    """Per-image random HSV jitter.

    ``hue_delta`` is a fraction of the hue circle; the saturation and value
    deltas are half-widths of a multiplicative factor range around 1.
    The defaults are deliberately extreme.
    """

    hue_delta: float = 0.5
    sat_scale_delta: float = 0.5
    val_scale_delta: float = 0.5

    def __post_init__(self):
        if min(self.hue_delta, self.sat_scale_delta, self.val_scale_delta) < 0:
            raise ConfigError("HSV jitter deltas must be non-negative")
        if self.hue_delta > 0.5:
            raise ConfigError("hue_delta must be <= 0.5")


def hsv_color_augment(image, cfg: HsvJitterConfig, rng) -> np.ndarray:
    # Three draws per image, always in this order, regardless of the config.
    dh = rng.uniform(-cfg.hue_delta, cfg.hue_delta)
    fs = rng.uniform(1.0 - cfg.sat_scale_delta, 1.0 + cfg.sat_scale_delta)
    fv = rng.uniform(1.0 - cfg.val_scale_delta, 1.0 + cfg.val_scale_delta)
    hsv = rgb_to_hsv(_to_unit(image))
    hsv[..., 0] = np.mod(hsv[..., 0] + dh, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * fs, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * fv, 0.0, 1.0)
    return _from_unit(hsv_to_rgb(hsv))


# ---------------------------------------------------------------------------
# Geometric augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeoAugConfig:
    """Random flip / right-angle rotation / crop.

    ``pad`` reflect-pads the image before cropping so that a crop of the
    full input size still translates the content. ``crop_size=None`` keeps
    the input size.
    """

    allow_flips: bool = True
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    crop_size: int | None = None
    pad: int = 0

    def __post_init__(self):
        rot = tuple(int(r) for r in self.rotations)
        object.__setattr__(self, "rotations", rot)
        if not rot:
            raise ConfigError("rotations must be non-empty")
        if any(r not in (0, 90, 180, 270) for r in rot):
            raise ConfigError(f"rotations must be multiples of 90 in [0, 270], got {rot}")
        if self.crop_size is not None and self.crop_size < 1:
            raise ConfigError("crop_size must be positive")
        if self.pad < 0:
            raise ConfigError("pad must be non-negative")


def geometric_augment(image, cfg: GeoAugConfig, rng) -> np.ndarray:
    image = np.asarray(image)
    h, w = image.shape[:2]
    crop = cfg.crop_size if cfg.crop_size is not None else min(h, w)
    if h < crop or w < crop:
        raise ConfigError(f"image {h}x{w} smaller than crop_size {crop}")

    flip = bool(rng.integers(2)) if cfg.allow_flips else False
    k = cfg.rotations[int(rng.integers(len(cfg.rotations)))] // 90
    out = image[:, ::-1] if flip else image
    out = np.rot90(out, k)
    if cfg.pad:
        out = np.pad(out, ((cfg.pad, cfg.pad), (cfg.pad, cfg.pad), (0, 0)), mode="reflect")
    h, w = out.shape[:2]
    y = int(rng.integers(h - crop + 1))
    x = int(rng.integers(w - crop + 1))
    return np.ascontiguousarray(out[y : y + crop, x : x + crop])


# ---------------------------------------------------------------------------
# Stain separation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StainProfile:
    """Stain color matrix (3x2, unit OD columns, hematoxylin first) and the
    robust maximum concentration of each stain."""

    stain_matrix: np.ndarray
    max_concentrations: np.ndarray

    def __post_init__(self):
        m = np.array(self.stain_matrix, dtype=np.float64).reshape(3, 2)
        c = np.array(self.max_concentrations, dtype=np.float64).reshape(2)
        if np.any(m < 0) or not np.allclose(np.linalg.norm(m, axis=0), 1.0, atol=1e-6):
            raise StainError("stain matrix columns must be non-negative and unit norm")
        if np.any(c <= 0) or not np.all(np.isfinite(c)):
            raise StainError("max concentrations must be positive")
        m.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_concentrations", c)

    def to_dict(self) -> dict:
        return {
            "stain_matrix": self.stain_matrix.tolist(),
            "max_concentrations": self.max_concentrations.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StainProfile":
        return cls(np.asarray(d["stain_matrix"]), np.asarray(d["max_concentrations"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "StainProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class StainConfig:
    od_threshold: float = 0.15
    min_tissue_fraction: float = 0.05
    sparsity: float = 0.1
    max_iter: int = 200
    tol: float = 1e-4
    percentile: float = 99.0
    max_pixels: int = 20000
    # Floor for max concentrations of an (almost) absent stain.
    min_concentration: float = 1e-6


def _nn_quadratic_2d(g11, g12, g22, b1, b2):
    """Exact minimizer of ``0.5 h'Gh - b'h`` over ``h >= 0`` for a 2x2
    positive semi-definite ``G``, vectorized over ``b``.

    Checks the interior solution and the three boundary faces, keeping the
    feasible candidate with the lowest objective.
    """
    b1 = np.asarray(b1, dtype=np.float64)
    b2 = np.asarray(b2, dtype=np.float64)
    det = g11 * g22 - g12 * g12

    def objective(h1, h2):
        return 0.5 * (g11 * h1 * h1 + 2 * g12 * h1 * h2 + g22 * h2 * h2) - b1 * h1 - b2 * h2

    zero = np.zeros_like(b1)
    cand = [(zero, zero)]
    if g11 > 0:
        cand.append((np.maximum(b1 / g11, 0.0), zero))
    if g22 > 0:
        cand.append((zero, np.maximum(b2 / g22, 0.0)))
    best1, best2 = cand[0]
    best_f = objective(best1, best2)
    for h1, h2 in cand[1:]:
        f = objective(h1, h2)
        better = f < best_f
        best1 = np.where(better, h1, best1)
        best2 = np.where(better, h2, best2)
        best_f = np.where(better, f, best_f)
    if det > 1e-12 * max(g11 * g22, 1e-300):
        h1 = (g22 * b1 - g12 * b2) / det
        h2 = (g11 * b2 - g12 * b1) / det
        ok = (h1 >= 0) & (h2 >= 0)
        f = np.where(ok, objective(h1, h2), np.inf)
        better = f < best_f
        best1 = np.where(better, h1, best1)
        best2 = np.where(better, h2, best2)
    return np.stack([best1, best2])


def _codes(W, V, sparsity):
    """Non-negative (optionally l1-penalized) codes of ``V`` (3xp) on ``W``."""
    G = W.T @ W
    B = W.T @ V - sparsity
    return _nn_quadratic_2d(G[0, 0], G[0, 1], G[1, 1], B[0], B[1])


def _dictionary_step(H, V, W):
    """One pass of block coordinate descent over the atoms, each projected
    onto the non-negative unit ball. Never increases the objective."""
    W = W.copy()
    A = H @ H.T
    B = V @ H.T
    for k in range(2):
        if A[k, k] <= 1e-12:
            continue  # unused atom keeps its direction
        u = W[:, k] + (B[:, k] - W @ A[:, k]) / A[k, k]
        u = np.maximum(u, 0.0)
        W[:, k] = u / max(np.linalg.norm(u), 1.0)
    return W


def _initial_dictionary(V):
    """Two extreme OD directions in the dominant plane of the data."""
    U = V / np.linalg.norm(V, axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(V.T, full_matrices=False)
    basis = vt[:2]
    if basis[0].sum() < 0:
        basis[0] = -basis[0]
    proj = basis @ U
    phi = np.arctan2(proj[1], proj[0])
    lo, hi = np.percentile(phi, [1, 99])
    W = np.stack(
        [basis.T @ [np.cos(lo), np.sin(lo)], basis.T @ [np.cos(hi), np.sin(hi)]], axis=1
    )
    W = np.maximum(W, 0.0)
    W = W / np.maximum(np.linalg.norm(W, axis=0), 1e-12)
    if abs(W[:, 0] @ W[:, 1]) > 0.99:
        # Single-stain data: pair the observed direction with the least
        # parallel reference stain.
        first = W[:, 0] if np.linalg.norm(W[:, 0]) > 0 else REFERENCE_HE[:, 0]
        ref = REFERENCE_HE[:, np.argmin(np.abs(REFERENCE_HE.T @ first))]
        W = np.stack([first, ref], axis=1)
    return W


def _foreground(od, threshold):
    return np.linalg.norm(od, axis=-1) > threshold


def estimate_stain_profile(image, cfg: StainConfig | None = None) -> StainProfile:
    """Sparse non-negative stain separation of an RGB image.

    Factorizes foreground optical densities as ``OD ~ W H`` with
    ``W >= 0`` (unit columns) and ``H >= 0`` under an l1 penalty on ``H``,
    by alternating exact block updates. Raises :class:`StainError` with code
    ``insufficient_tissue`` or ``degenerate_factorization``.
    """
    cfg = cfg or StainConfig()
    od = rgb_to_od(image).reshape(-1, 3)
    mask = _foreground(od, cfg.od_threshold)
    if mask.mean() < cfg.min_tissue_fraction:
        raise StainError(
            f"foreground fraction {mask.mean():.3f} below {cfg.min_tissue_fraction}",
            code="insufficient_tissue",
        )
    V_all = od[mask].T
    V = V_all
    if V.shape[1] > cfg.max_pixels:
        idx = np.random.default_rng(0).choice(V.shape[1], cfg.max_pixels, replace=False)
        V = V[:, np.sort(idx)]

    W = _initial_dictionary(V)
    prev = np.inf
    for _ in range(cfg.max_iter):
        H = _codes(W, V, cfg.sparsity)
        err = 0.5 * np.sum((V - W @ H) ** 2) + cfg.sparsity * H.sum()
        if prev - err <= cfg.tol * err:
            break
        prev = err
        W = _dictionary_step(H, V, W)
    norms = np.linalg.norm(W, axis=0)
    W = W / np.where(norms > 1e-12, norms, 1.0)

    if abs(W[:, 0] @ W[:, 1]) > 0.999:
        raise StainError("stain vectors are near-parallel", code="degenerate_factorization")
    # Hematoxylin absorbs more red light than eosin.
    if W[0, 0] < W[0, 1]:
        W = W[:, ::-1]
    H = _codes(W, V_all, cfg.sparsity)
    maxc = np.percentile(H, cfg.percentile, axis=1)
    return StainProfile(W, np.maximum(maxc, cfg.min_concentration))


def stain_concentrations(od, stain_matrix) -> np.ndarray:
    """Per-pixel non-negative least squares concentrations, shape ``(2, p)``
    for ``od`` of shape ``(..., 3)``."""
    V = np.asarray(od, dtype=np.float64).reshape(-1, 3).T
    return _codes(np.asarray(stain_matrix, dtype=np.float64), V, 0.0)


def normalize_od(od, target: StainProfile, source: StainProfile) -> np.ndarray:
    """Re-render optical densities with the target stains and concentration
    scale. No background handling; returns float OD of the input shape."""
    od = np.asarray(od, dtype=np.float64)
    H = stain_concentrations(od, source.stain_matrix)
    H = H * (target.max_concentrations / source.max_concentrations)[:, None]
    return (target.stain_matrix @ H).T.reshape(od.shape)


def stain_normalize(
    image,
    target: StainProfile,
    source: StainProfile | None = None,
    cfg: StainConfig | None = None,
) -> np.ndarray:
    """Normalize ``image`` to ``target``; background pixels pass through."""
    cfg = cfg or StainConfig()
    image = np.asarray(image, dtype=np.uint8)
    if source is None:
        source = estimate_stain_profile(image, cfg)
    od = rgb_to_od(image)
    out = od_to_rgb(normalize_od(od, target, source))
    background = ~_foreground(od, cfg.od_threshold)
    out[background] = image[background]
    return out
