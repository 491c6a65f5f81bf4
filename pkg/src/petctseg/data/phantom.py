"""Synthetic dual-modality phantom cohort generator.

Each phantom is a soft-tissue background (HU about 40 with sigma-15 noise)
holding one ellipsoidal tumor, up to two smaller node lesions, bone and air
distractors far outside the soft-tissue window, and benign pseudo-lesions.
The segmentation cue is deliberately split across modalities:

* CT carries a sharp but low-contrast boundary (a 25-40 HU shift over a
  noisy background) on tumors AND on pseudo-lesions, so CT alone cannot
  tell which soft-tissue blob is tumor.
* PET carries a bright uptake blob on true tumor only, blurred with a
  per-phantom random kernel, so PET alone localizes the tumor but cannot
  resolve the exact boundary.

Jointly the channels determine the lesion; separately each is ambiguous.
Ground truth is the exact generated lesion voxels (tumor union nodes) and
the T-stage label comes from tumor-volume quartiles over the cohort.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from ..errors import DataError
from .records import PatientRecord

SOFT_TISSUE_HU = 40.0
SOFT_TISSUE_NOISE = 15.0
BONE_HU = 900.0
AIR_HU = -950.0
LESION_SHIFT_HU = (25.0, 40.0)
POSITIVE_FRACTION_RANGE = (0.001, 0.05)


def _ellipsoid(dims, center, radii) -> np.ndarray:
    zz = ((np.arange(dims[0]) - center[0]) / radii[0]) ** 2
    yy = ((np.arange(dims[1]) - center[1]) / radii[1]) ** 2
    xx = ((np.arange(dims[2]) - center[2]) / radii[2]) ** 2
    return (zz[:, None, None] + yy[None, :, None] + xx[None, None, :]) <= 1.0


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _convolve_same_length(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # np.convolve mode="same" returns max(len(a), len(kernel)) values, so a
    # kernel longer than the axis would grow it; slice the centered window
    # of the full convolution instead to always keep len(a).
    full = np.convolve(a, kernel, mode="full")
    start = (kernel.size - 1) // 2
    return full[start:start + a.size]


def _blur(vol: np.ndarray, sigmas: Sequence[float]) -> np.ndarray:
    out = vol.astype(np.float64)
    for axis, sigma in enumerate(sigmas):
        if sigma > 0:
            out = np.apply_along_axis(_convolve_same_length, axis, out,
                                      _gaussian_kernel(sigma))
    return out


def _place(rng, dims, radii, margin=1.5):
    center = []
    for size, r in zip(dims, radii):
        lo, hi = r + margin, size - 1 - r - margin
        if lo > hi:
            lo = hi = (size - 1) / 2.0
        center.append(rng.uniform(lo, hi))
    return tuple(center)


def _lesion_radii(rng, dims, frac):
    """Semi-axes of a random-aspect ellipsoid covering `frac` of the volume."""
    target = frac * float(np.prod(dims))
    r_eff = (3.0 * target / (4.0 * np.pi)) ** (1.0 / 3.0)
    az = rng.uniform(0.6, 0.9)  # flatter along the slice axis
    ay = rng.uniform(0.8, 1.25)
    ax = 1.0 / (az * ay)
    return (max(1.2, r_eff * az), max(1.2, r_eff * ay), max(1.2, r_eff * ax))


def _disjoint_blob(rng, dims, radii, keep_clear, tries=40):
    """Ellipsoid mask that avoids `keep_clear`, or None if placement fails."""
    for _ in range(tries):
        mask = _ellipsoid(dims, _place(rng, dims, radii), radii)
        if mask.any() and not (mask & keep_clear).any():
            return mask
    return None


def _one_phantom(rng, dims):
    ct = rng.normal(SOFT_TISSUE_HU, SOFT_TISSUE_NOISE, dims)

    gtv_frac = rng.uniform(0.004, 0.022)
    radii = _lesion_radii(rng, dims, gtv_frac)
    gtv = _ellipsoid(dims, _place(rng, dims, radii), radii)
    nodes = np.zeros(dims, dtype=bool)
    for _ in range(int(rng.integers(0, 3))):
        nr = _lesion_radii(rng, dims, gtv_frac * rng.uniform(0.10, 0.25))
        blob = _disjoint_blob(rng, dims, nr, gtv | nodes)
        if blob is not None:
            nodes |= blob
    truth = gtv | nodes

    pseudo = np.zeros(dims, dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        pr = _lesion_radii(rng, dims, gtv_frac * rng.uniform(0.15, 0.6))
        blob = _disjoint_blob(rng, dims, pr, truth | pseudo)
        if blob is not None:
            pseudo |= blob

    # hard distractors stay clear of every soft-tissue structure
    occupied = truth | pseudo
    for hu, count, rmax in [(BONE_HU, int(rng.integers(2, 4)), 3.5),
                            (AIR_HU, int(rng.integers(1, 3)), 3.0)]:
        for _ in range(count):
            r = tuple(rng.uniform(1.5, rmax) for _ in range(3))
            inflated = tuple(x + 2.0 for x in r)
            for _ in range(40):
                center = _place(rng, dims, r)
                if not (_ellipsoid(dims, center, inflated) & occupied).any():
                    mask = _ellipsoid(dims, center, r)
                    ct[mask] = rng.normal(hu, 40.0, int(mask.sum()))
                    break

    for structure in (gtv, nodes, pseudo):
        if structure.any():
            ct[structure] += rng.uniform(*LESION_SHIFT_HU)

    # wide, per-phantom-random in-plane blur: uptake localizes the tumor
    # but deliberately cannot resolve its boundary
    sigmas = (rng.uniform(0.7, 1.1), rng.uniform(2.6, 3.6), rng.uniform(2.6, 3.6))
    blob = _blur(truth.astype(np.float64), sigmas)
    pet = rng.gamma(2.0, 0.05, dims) + rng.uniform(3.5, 5.5) * blob
    pet = np.clip(pet + rng.normal(0.0, 0.02, dims), 0.0, None)

    return ct, pet, gtv, nodes


def generate_phantom_cohort(n_patients: int, dims, seed: int) -> List[PatientRecord]:
    """Deterministically generate a cohort of dual-modality phantoms.

    dims is (D, H, W); every phantom's positive-voxel fraction lands in
    [0.1%, 5%] of the volume. Same seed, bitwise-identical cohort.
    """
    if n_patients < 3:
        raise DataError("phantom cohort needs at least 3 patients")
    dims = tuple(int(x) for x in dims)
    if len(dims) != 3 or dims[0] < 4 or dims[1] < 16 or dims[2] < 16:
        raise DataError(f"invalid phantom dims {dims}: need (D>=4, H>=16, W>=16)")
    rng = np.random.Generator(np.random.PCG64(seed))

    lo, hi = POSITIVE_FRACTION_RANGE
    volumes = []
    raw = []
    for _ in range(n_patients):
        for _ in range(8):
            ct, pet, gtv, nodes = _one_phantom(rng, dims)
            frac = float((gtv | nodes).mean())
            if lo <= frac <= hi:
                break
        else:
            raise DataError("phantom generation failed to hit the positive-"
                            "fraction band; dims too small")
        raw.append((ct, pet, gtv, nodes))
        volumes.append(int(gtv.sum()))

    quartiles = np.quantile(volumes, [0.25, 0.5, 0.75])
    records = []
    for i, (ct, pet, gtv, nodes) in enumerate(raw):
        stage = 1 + int(np.searchsorted(quartiles, volumes[i], side="right"))
        records.append(PatientRecord(
            patient_id=f"ph{i:03d}", t_stage=min(stage, 4),
            ct=ct.astype(np.float32), pet=pet.astype(np.float32),
            gtv=gtv.astype(np.uint8), nodes=nodes.astype(np.uint8)))
    return records
