"""Patient-level stratified train/validation/test splitting.

Split sizes are fixed globally by largest-remainder rounding of N*fraction,
then filled stratum by stratum (T-stage): each stratum contributes its
proportional floor to every split and the leftovers go to the
largest-remainder cells that still have global capacity, at most one extra
per (stratum, split) cell. This keeps every stratum's per-split count
within one patient of proportional while the global sizes stay exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..errors import DataError
from .records import PatientRecord

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class SplitManifest:
    train: List[str]
    val: List[str]
    test: List[str]
    histograms: Dict[str, Dict[int, int]]

    def members(self, name: str) -> List[str]:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return getattr(self, name)

    def to_json(self) -> str:
        obj = {name: self.members(name) for name in SPLIT_NAMES}
        obj["histograms"] = {name: {str(k): v for k, v in sorted(h.items())}
                             for name, h in self.histograms.items()}
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "SplitManifest":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"bad split manifest: {exc}") from exc
        try:
            lists = {name: list(obj[name]) for name in SPLIT_NAMES}
            hist = {name: {int(k): int(v) for k, v in obj["histograms"][name].items()}
                    for name in SPLIT_NAMES}
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad split manifest structure: {exc}") from exc
        return SplitManifest(train=lists["train"], val=lists["val"],
                             test=lists["test"], histograms=hist)


def _largest_remainder(total: int, fractions: Sequence[float]) -> List[int]:
    raw = [total * f for f in fractions]
    base = [int(np.floor(x)) for x in raw]
    order = sorted(range(len(fractions)), key=lambda j: (-(raw[j] - base[j]), j))
    for j in order[:total - sum(base)]:
        base[j] += 1
    return base


def _as_pairs(patients) -> List[Tuple[str, int]]:
    pairs = []
    for p in patients:
        if isinstance(p, PatientRecord):
            pairs.append((p.patient_id, int(p.t_stage)))
        else:
            pid, stage = p
            pairs.append((str(pid), int(stage)))
    return pairs


def stratified_split(patients, fractions: Sequence[float],
                     seed: int) -> SplitManifest:
    """Split patients (records or (id, t_stage) pairs) by T-stage stratum.

    Deterministic for a given cohort and seed, independent of input order.
    Fractions must be three positive numbers summing to 1 within 1e-9.
    """
    pairs = _as_pairs(patients)
    if not pairs:
        raise DataError("cannot split an empty cohort")
    ids = [pid for pid, _ in pairs]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids in cohort")
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fr)!r}")

    targets = _largest_remainder(len(pairs), fr)

    rng = np.random.Generator(np.random.PCG64(seed))
    by_stage: Dict[int, List[str]] = {}
    for pid, stage in sorted(pairs):  # canonical order before shuffling
        by_stage.setdefault(stage, []).append(pid)
    stages = sorted(by_stage)
    for stage in stages:
        group = by_stage[stage]
        by_stage[stage] = [group[i] for i in rng.permutation(len(group))]

    counts = {stage: [int(np.floor(len(by_stage[stage]) * f)) for f in fr]
              for stage in stages}
    assigned = [sum(counts[stage][j] for stage in stages) for j in range(3)]
    leftovers = {stage: len(by_stage[stage]) - sum(counts[stage])
                 for stage in stages}

    cells = sorted((-(len(by_stage[stage]) * fr[j] - counts[stage][j]), stage, j)
                   for stage in stages for j in range(3))
    for _, stage, j in cells:
        if leftovers[stage] > 0 and assigned[j] < targets[j]:
            counts[stage][j] += 1
            assigned[j] += 1
            leftovers[stage] -= 1
    # rare fallback: a stratum's leftovers outlived every open cell of its
    # own; place them wherever global capacity remains
    for stage in stages:
        while leftovers[stage] > 0:
            j = max(range(3), key=lambda k: (targets[k] - assigned[k], -k))
            counts[stage][j] += 1
            assigned[j] += 1
            leftovers[stage] -= 1

    splits: Dict[str, List[str]] = {name: [] for name in SPLIT_NAMES}
    for stage in stages:
        pos = 0
        for j, name in enumerate(SPLIT_NAMES):
            take = counts[stage][j]
            splits[name].extend(by_stage[stage][pos:pos + take])
            pos += take

    stage_of = dict(pairs)
    histograms = {}
    for name in SPLIT_NAMES:
        hist: Dict[int, int] = {}
        for pid in splits[name]:
            hist[stage_of[pid]] = hist.get(stage_of[pid], 0) + 1
        histograms[name] = hist
    return SplitManifest(train=splits["train"], val=splits["val"],
                         test=splits["test"], histograms=histograms)
