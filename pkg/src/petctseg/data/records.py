"""Patient records and preprocessing: HU windowing, normalization, mask
union, ROI cropping, and slicing volumes into 2-D training samples.

Volumes are (D, H, W) arrays: D transversal slices of H rows by W columns.
CT holds Hounsfield units, PET nonnegative uptake values, and the two masks
are strictly binary. Windowing is applied exactly once, inside
``make_slices``; records always hold raw HU.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from ..errors import DataError

PET_PERCENTILE = 99.0
_EPS = 1e-12


class Modality(enum.Enum):
    CT = "ct"
    PET = "pet"
    PETCT = "petct"

    @property
    def in_channels(self) -> int:
        return 2 if self is Modality.PETCT else 1

    @property
    def display_name(self) -> str:
        """Row label used in the results table."""
        return {Modality.CT: "CT-only", Modality.PET: "PET-only",
                Modality.PETCT: "PET/CT"}[self]


@dataclass(frozen=True)
class WindowSpec:
    """HU display window; the map rescales [center - width/2,
    center + width/2] onto [0, 1] and clamps outside."""

    width: float
    center: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("window width must be > 0")

    @property
    def lo(self) -> float:
        return self.center - self.width / 2.0

    @property
    def hi(self) -> float:
        return self.center + self.width / 2.0


def _as_binary_mask(arr: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if not np.isin(a, (0, 1)).all():
        raise DataError(f"{name} mask must be binary")
    return a.astype(np.uint8)


@dataclass
class PatientRecord:
    """One patient's co-registered volumes and annotations."""

    patient_id: str
    t_stage: int
    ct: np.ndarray
    pet: np.ndarray
    gtv: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        self.ct = np.asarray(self.ct, dtype=np.float32)
        self.pet = np.asarray(self.pet, dtype=np.float32)
        if self.ct.ndim != 3:
            raise DataError(f"volumes must be (D,H,W), got {self.ct.shape}")
        self.gtv = _as_binary_mask(self.gtv, "gtv")
        self.nodes = _as_binary_mask(self.nodes, "nodes")
        dims = {a.shape for a in (self.ct, self.pet, self.gtv, self.nodes)}
        if len(dims) != 1:
            raise DataError(f"patient {self.patient_id}: volume dims disagree: "
                            f"{sorted(dims)}")
        if not (np.isfinite(self.ct).all() and np.isfinite(self.pet).all()):
            raise DataError(f"patient {self.patient_id}: non-finite voxel values")

    @property
    def dims(self) -> tuple:
        return self.ct.shape


def window_ct(hu: np.ndarray, window: WindowSpec) -> np.ndarray:
    """Clamp HU values to the window range and rescale onto [0, 1]."""
    hu = np.asarray(hu, dtype=np.float32)
    out = (np.clip(hu, window.lo, window.hi) - window.lo) / window.width
    return out.astype(np.float32)


def minmax_norm(vol: np.ndarray) -> np.ndarray:
    """Per-volume min-max rescale to [0, 1]; constant volumes map to 0."""
    vol = np.asarray(vol, dtype=np.float32)
    lo, hi = float(vol.min()), float(vol.max())
    return ((vol - lo) / max(hi - lo, _EPS)).astype(np.float32)


def pet_norm(pet: np.ndarray) -> np.ndarray:
    """Divide by the per-volume 99th-percentile uptake and clamp to [0, 1],
    so hot-spot outliers cannot crush the scale."""
    pet = np.asarray(pet, dtype=np.float32)
    q = float(np.percentile(pet, PET_PERCENTILE))
    return np.clip(pet / max(q, _EPS), 0.0, 1.0).astype(np.float32)


def ground_truth_mask(rec: PatientRecord) -> np.ndarray:
    """Voxelwise union of the tumor and pathologic-node masks."""
    if rec.gtv.shape != rec.nodes.shape:
        raise DataError("mask dims disagree")
    return (rec.gtv | rec.nodes).astype(np.uint8)


def crop_roi(rec: PatientRecord, z: tuple, y: tuple, x: tuple) -> PatientRecord:
    """Crop all four volumes to the half-open ranges z, y, x.

    Cropping away any ground-truth-positive voxel is a hard error: a region
    of interest must never discard tumor.
    """
    d, h, w = rec.dims
    (z0, z1), (y0, y1), (x0, x1) = z, y, x
    for (lo, hi, size, name) in [(z0, z1, d, "z"), (y0, y1, h, "y"),
                                 (x0, x1, w, "x")]:
        if not (0 <= lo < hi <= size):
            raise DataError(f"roi {name} range [{lo},{hi}) outside [0,{size})")
    truth = ground_truth_mask(rec)
    kept = truth[z0:z1, y0:y1, x0:x1]
    if int(kept.sum()) != int(truth.sum()):
        raise DataError("roi excludes ground-truth-positive voxels")
    sl = (slice(z0, z1), slice(y0, y1), slice(x0, x1))
    return replace(rec, ct=rec.ct[sl].copy(), pet=rec.pet[sl].copy(),
                   gtv=rec.gtv[sl].copy(), nodes=rec.nodes[sl].copy())


@dataclass(frozen=True)
class SliceSample:
    """One transversal slice prepared for the network: normalized channels
    (C, H, W) in [0, 1] and the binary mask (1, H, W)."""

    patient_id: str
    slice_index: int
    channels: np.ndarray
    mask: np.ndarray


def make_slices(rec: PatientRecord, modality: Modality,
                window: Optional[WindowSpec] = None) -> List[SliceSample]:
    """Turn one patient volume into per-slice training samples.

    The CT channel is windowed when a window is given, min-max normalized
    otherwise; the PET channel is percentile-normalized. PETCT stacks
    channels in the fixed order [CT, PET]. PET-only input takes no window.
    """
    if modality is Modality.PET and window is not None:
        raise ValueError("windowing does not apply to PET-only input")
    channels = []
    if modality in (Modality.CT, Modality.PETCT):
        ct = window_ct(rec.ct, window) if window is not None else minmax_norm(rec.ct)
        channels.append(ct)
    if modality in (Modality.PET, Modality.PETCT):
        channels.append(pet_norm(rec.pet))
    stack = np.stack(channels, axis=1)  # (D, C, H, W)
    truth = ground_truth_mask(rec).astype(np.float32)
    return [SliceSample(patient_id=rec.patient_id, slice_index=i,
                        channels=stack[i], mask=truth[i][None])
            for i in range(rec.dims[0])]
