"""Activation maximization by gradient ascent on the input image.

Starting from seeded noise around mid-gray, the image is moved along the
L2-normalized gradient of a filter's spatial-mean activation. Pixel values
are not clamped while optimizing; they are min-max rescaled only for
display.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import write_image
from .errors import FeatVizError
from .models import TrainedModel

__all__ = ["FeatVizConfig", "FeatVizResult", "maximize_filter", "maximize_filters", "to_display", "contact_sheet", "save_results"]


@dataclass(frozen=True)
class FeatVizConfig:
    steps: int = 512
    step_size: float = 0.05
    init_mean: float = 0.5
    init_amplitude: float = 0.1
    seed: int = 0
    jitter: int = 0  # max random translation (pixels) applied per step
    image_size: int | None = None  # defaults to the model input size
    dead_patience: int = 10

    def __post_init__(self):
        if self.steps < 0:
            raise FeatVizError("steps must be >= 0")
        if self.step_size <= 0:
            raise FeatVizError("step_size must be positive")
        if self.jitter < 0:
            raise FeatVizError("jitter must be >= 0")


@dataclass
class FeatVizResult:
    filter_idx: int
    image: np.ndarray  # raw optimized image, float32 (H, W, 3)
    trace: np.ndarray  # activation before the first step and after each step
    dead: bool = False

    @property
    def display(self) -> np.ndarray:
        return to_display(self.image)


def to_display(image: np.ndarray) -> np.ndarray:
    """Linear min-max rescale to uint8."""
    lo, hi = float(image.min()), float(image.max())
    if hi - lo < 1e-12:
        return np.full(image.shape, 128, dtype=np.uint8)
    return np.rint((image - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _layer_activation(model, module, x, filters):
    captured = {}

    def hook(_m, _i, out):
        captured["out"] = out

    handle = module.register_forward_hook(hook)
    try:
        model.net(x)
    finally:
        handle.remove()
    out = captured["out"]
    if filters is None:
        return out
    return out[torch.arange(len(filters)), filters].mean(dim=(1, 2))


def maximize_filters(
    model: TrainedModel,
    layer: str,
    filter_indices: Sequence[int],
    cfg: FeatVizConfig = FeatVizConfig(),
) -> list[FeatVizResult]:
    """Optimize one image per filter, batched. Filters whose gradient stays
    zero for more than ``cfg.dead_patience`` consecutive steps are returned
    with ``dead=True`` instead of raising."""
    try:
        module = model.module(layer)
    except KeyError:
        raise FeatVizError(f"unknown layer {layer!r}", code="unknown_layer") from None
    size = cfg.image_size or model.spec.input_size
    net = model.net
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)

    try:
        with torch.no_grad():
            probe = _layer_activation(model, module, torch.full((1, 3, size, size), cfg.init_mean), None)
        n_filters = probe.shape[1]
        idx = [int(i) for i in filter_indices]
        bad = [i for i in idx if not 0 <= i < n_filters]
        if bad:
            raise FeatVizError(f"filter indices {bad} out of range for {n_filters} filters", code="invalid_filter")
        if not idx:
            return []

        init = [
            cfg.init_mean + np.random.default_rng([cfg.seed, i]).uniform(-cfg.init_amplitude, cfg.init_amplitude, (3, size, size))
            for i in idx
        ]
        x = torch.from_numpy(np.stack(init).astype(np.float32)).contiguous(memory_format=torch.channels_last)
        filters = torch.tensor(idx)
        jitter_rng = np.random.default_rng([cfg.seed, 0xFFFFFFFF])  # distinct from per-filter streams
        trace = np.zeros((cfg.steps + 1, len(idx)), dtype=np.float64)
        zero_run = np.zeros(len(idx), dtype=np.int64)
        dead = np.zeros(len(idx), dtype=bool)

        for step in range(cfg.steps):
            shift = tuple(int(s) for s in jitter_rng.integers(-cfg.jitter, cfg.jitter + 1, 2)) if cfg.jitter else (0, 0)
            xs = torch.roll(x, shift, dims=(2, 3)).requires_grad_(True)
            act = _layer_activation(model, module, xs, filters)
            (grad,) = torch.autograd.grad(act.sum(), xs)
            grad = torch.roll(grad, (-shift[0], -shift[1]), dims=(2, 3))
            if cfg.jitter:
                with torch.no_grad():
                    act = _layer_activation(model, module, x, filters)
            trace[step] = act.detach().numpy()

            norm = grad.flatten(1).norm(dim=1)
            zero = (norm == 0).numpy()
            zero_run = np.where(zero, zero_run + 1, 0)
            dead |= zero_run > cfg.dead_patience
            scale = torch.where(norm > 0, cfg.step_size / norm.clamp_min(1e-30), torch.zeros_like(norm))
            x = (x + grad * scale[:, None, None, None]).detach()

        with torch.no_grad():
            trace[cfg.steps] = _layer_activation(model, module, x, filters).numpy()
    finally:
        for p in net.parameters():
            p.requires_grad_(True)

    images = x.permute(0, 2, 3, 1).contiguous().numpy()
    return [FeatVizResult(i, images[k], trace[:, k].copy(), bool(dead[k])) for k, i in enumerate(idx)]


def maximize_filter(model: TrainedModel, layer: str, filter_idx: int, cfg: FeatVizConfig = FeatVizConfig()) -> FeatVizResult:
    """Single-filter activation maximization. Raises ``dead_filter`` if the
    gradient vanishes for too long."""
    (res,) = maximize_filters(model, layer, [filter_idx], cfg)
    if res.dead:
        raise FeatVizError(f"filter {filter_idx} has zero gradient everywhere", code="dead_filter")
    return res


def contact_sheet(images: Sequence[np.ndarray], ncols: int = 8, pad: int = 2) -> np.ndarray:
    """Tile uint8 images into one grid with white separators."""
    if not images:
        raise FeatVizError("no images to tile")
    h, w, c = images[0].shape
    nrows = -(-len(images) // ncols)
    sheet = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad, c), 255, dtype=np.uint8)
    for k, im in enumerate(images):
        r, q = divmod(k, ncols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        sheet[y : y + h, x : x + w] = im
    return sheet


def save_results(results: Sequence[FeatVizResult], out_dir, ncols: int = 8) -> dict:
    """Write ``filter_XXX.png`` per filter, ``trace.csv`` (one column per
    filter) and ``sheet.png``. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for r in results:
        p = out / f"filter_{r.filter_idx:03d}.png"
        write_image(p, r.display)
        paths[r.filter_idx] = p
    trace_path = out / "trace.csv"
    with trace_path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step"] + [f"filter_{r.filter_idx}" for r in results])
        for step in range(len(results[0].trace) if results else 0):
            w.writerow([step] + [repr(float(r.trace[step])) for r in results])
    sheet_path = out / "sheet.png"
    if results:
        write_image(sheet_path, contact_sheet([r.display for r in results], ncols))
    return dict(images=paths, trace=trace_path, sheet=sheet_path)
