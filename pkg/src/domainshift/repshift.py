"""Representation shift between two datasets as seen by a trained model.

For every filter of a convolutional layer, each image contributes one
sample: the spatial mean of that filter's feature map. The shift for a
filter is the Wasserstein-1 distance between the empirical distributions of
those samples on a reference and a target dataset; the representation
shift is the unweighted mean of the per-filter distances.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import PatchDataset
from .errors import ActivationError, ActivationFileError
from .models import TrainedModel, to_tensor

__all__ = [
    "ActivationMatrix",
    "RepShiftResult",
    "extract_mean_activations",
    "wasserstein_1d",
    "representation_shift",
    "save_activations",
    "load_activations",
]


@dataclass
class ActivationMatrix:
    """``values[j, i]`` is the mean activation of filter ``i`` on image ``j``
    (float32, row order = dataset record order)."""

    values: np.ndarray
    layer_id: str
    dataset_name: str
    model_fingerprint: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ActivationError(f"activation matrix must be n x L with n, L >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ActivationError("activation matrix has non-finite entries", code="non_finite")
        self.values = v

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_filters(self) -> int:
        return self.values.shape[1]


class _Stop(Exception):
    pass


@torch.no_grad()
def extract_mean_activations(
    model: TrainedModel,
    ds: PatchDataset,
    layer: str | None = None,
    images: np.ndarray | None = None,
    batch_size: int = 64,
) -> ActivationMatrix:
    """Spatial-mean activations of every filter in ``layer`` (a tag from
    ``model.layer_map`` or a module name; default ``last_conv``).

    Runs in evaluation mode and stops the forward pass at the layer.
    """
    layer = layer or "last_conv"
    try:
        module = model.module(layer)
    except KeyError:
        raise ActivationError(f"unknown layer {layer!r}", code="unknown_layer") from None
    if len(ds) == 0:
        raise ActivationError("cannot extract activations from an empty dataset", code="empty_dataset")
    images = ds.load_images() if images is None else images

    captured = []

    def hook(_module, _inputs, output):
        captured.append(output.mean(dim=(2, 3)))
        raise _Stop

    net = model.net
    net.eval()
    handle = module.register_forward_hook(hook)
    try:
        for i in range(0, len(images), batch_size):
            try:
                net(to_tensor(images[i : i + batch_size]))
            except _Stop:
                pass
    finally:
        handle.remove()
    values = torch.cat(captured).numpy()
    return ActivationMatrix(values, model.layer_map.get(layer, layer), ds.name, model.fingerprint())


def _as_samples(x, name):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ActivationError(f"{name}: empty sample list", code="empty_input")
    if not np.all(np.isfinite(x)):
        raise ActivationError(f"{name}: non-finite sample", code="non_finite")
    return x


def wasserstein_1d(a, b) -> float:
    """Exact Wasserstein-1 distance between two empirical distributions.

    Integrates ``|F_a^-1(q) - F_b^-1(q)|`` over ``q`` in ``(0, 1]``. Both
    quantile functions are step functions with jumps at ``i/n`` and ``j/m``;
    breakpoints are kept as integers in units of ``1/(n*m)`` so the merge is
    exact.
    """
    a = np.sort(_as_samples(a, "a"))
    b = np.sort(_as_samples(b, "b"))
    n, m = a.size, b.size
    ends = np.union1d(np.arange(1, n + 1, dtype=np.int64) * m, np.arange(1, m + 1, dtype=np.int64) * n)
    starts = np.concatenate(([0], ends[:-1]))
    widths = ends - starts
    diff = np.abs(a[starts // m] - b[starts // n])
    return float(np.dot(widths, diff) / (n * m))


@dataclass
class RepShiftResult:
    per_filter: np.ndarray
    mean_shift: float
    ref_name: str
    target_name: str
    layer_id: str
    model_fingerprint: str
    n_ref: int = 0
    n_target: int = 0

    def to_dict(self) -> dict:
        return dict(
            mean_shift=self.mean_shift,
            per_filter=[float(x) for x in self.per_filter],
            ref_name=self.ref_name,
            target_name=self.target_name,
            layer_id=self.layer_id,
            model_fingerprint=self.model_fingerprint,
            n_ref=self.n_ref,
            n_target=self.n_target,
        )

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def representation_shift(
    ref: ActivationMatrix,
    target: ActivationMatrix,
    allow_mismatch: bool = False,
    standardize: bool = False,
) -> RepShiftResult:
    """Mean over filters of the 1D Wasserstein distance between reference
    and target activation columns.

    ``allow_mismatch`` downgrades layer/model mismatches to warnings, for
    deliberate cross-model comparisons. ``standardize`` z-scores every
    filter by the reference mean and standard deviation first.
    """
    if ref.n_filters != target.n_filters:
        raise ActivationError(
            f"filter count mismatch: {ref.n_filters} vs {target.n_filters}", code="filter_count_mismatch"
        )
    for what, x, y, code in (
        ("layer", ref.layer_id, target.layer_id, "layer_mismatch"),
        ("model", ref.model_fingerprint, target.model_fingerprint, "model_mismatch"),
    ):
        if x != y:
            if not allow_mismatch:
                raise ActivationError(f"{what} mismatch: {x!r} vs {y!r}", code=code)
            warnings.warn(f"comparing activations across {what}s: {x!r} vs {y!r}", stacklevel=2)

    r = ref.values.astype(np.float64)
    t = target.values.astype(np.float64)
    if standardize:
        mu = r.mean(axis=0)
        sd = r.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        r = (r - mu) / sd
        t = (t - mu) / sd
    per_filter = np.array([wasserstein_1d(r[:, i], t[:, i]) for i in range(r.shape[1])])
    return RepShiftResult(
        per_filter=per_filter,
        mean_shift=float(per_filter.mean()),
        ref_name=ref.dataset_name,
        target_name=target.dataset_name,
        layer_id=ref.layer_id,
        model_fingerprint=ref.model_fingerprint,
        n_ref=ref.n,
        n_target=target.n,
    )


# ---------------------------------------------------------------------------
# Binary dump: b"RSHF" | u8 version | u32 n | u32 L | float32[n*L] | u32 crc32
# (little-endian, row-major). Metadata lives in a "<path>.json" sidecar.
# ---------------------------------------------------------------------------

_MAGIC = b"RSHF"
_VERSION = 1
_HEADER = struct.Struct("<4sBII")


def _sidecar(path) -> Path:
    return Path(f"{path}.json")


def save_activations(m: ActivationMatrix, path) -> None:
    payload = np.ascontiguousarray(m.values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, m.n, m.n_filters))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))
    meta = dict(layer_id=m.layer_id, dataset_name=m.dataset_name, model_fingerprint=m.model_fingerprint)
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_activations(path) -> ActivationMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ActivationFileError(f"{path}: truncated header", code="truncated")
    magic, version, n, L = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ActivationFileError(f"{path}: bad magic {magic!r}", code="bad_magic")
    if version != _VERSION:
        raise ActivationFileError(f"{path}: unsupported version {version}", code="bad_version")
    expected = _HEADER.size + 4 * n * L + 4
    if len(raw) != expected:
        code = "truncated" if len(raw) < expected else "length_mismatch"
        raise ActivationFileError(f"{path}: expected {expected} bytes for {n}x{L}, got {len(raw)}", code=code)
    payload = raw[_HEADER.size : expected - 4]
    (crc,) = struct.unpack_from("<I", raw, expected - 4)
    if zlib.crc32(payload) != crc:
        raise ActivationFileError(f"{path}: checksum mismatch", code="checksum_mismatch")
    values = np.frombuffer(payload, dtype="<f4").reshape(n, L).astype(np.float32)

    meta = dict(layer_id="unknown", dataset_name=Path(path).stem, model_fingerprint="unknown")
    side = _sidecar(path)
    if side.is_file():
        meta.update(json.loads(side.read_text()))
    return ActivationMatrix(values, meta["layer_id"], meta["dataset_name"], meta["model_fingerprint"])
