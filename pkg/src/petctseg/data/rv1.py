"""RV1 on-disk cohort format: JSON metadata plus flat little-endian blobs.

Layout::

    cohort/
      index.json                {"format": "rv1", "patients": [ids...]}
      <patient_id>/
        meta.json               {patient_id, t_stage, dims: [D,H,W],
                                 dtype: "f32le", files: {ct,pet,gtv,nodes}}
        ct.f32  pet.f32         float32 little-endian, row-major (D,H,W)
        gtv.u8  nodes.u8        uint8 masks with values {0,1}

Writers emit byte-identical output for identical inputs, so regeneration
with the same seed reproduces the cohort bitwise.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List

import numpy as np

from ..errors import DataError
from .records import PatientRecord

INDEX_NAME = "index.json"
META_NAME = "meta.json"
FORMAT_NAME = "rv1"
_FILES = {"ct": "ct.f32", "pet": "pet.f32", "gtv": "gtv.u8", "nodes": "nodes.u8"}


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _load_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def write_patient(patient_dir, rec: PatientRecord) -> None:
    patient_dir = Path(patient_dir)
    patient_dir.mkdir(parents=True, exist_ok=True)
    d, h, w = rec.dims
    meta = {
        "patient_id": rec.patient_id,
        "t_stage": int(rec.t_stage),
        "dims": [int(d), int(h), int(w)],
        "dtype": "f32le",
        "files": dict(_FILES),
    }
    _dump_json(patient_dir / META_NAME, meta)
    (patient_dir / _FILES["ct"]).write_bytes(
        np.ascontiguousarray(rec.ct, dtype="<f4").tobytes())
    (patient_dir / _FILES["pet"]).write_bytes(
        np.ascontiguousarray(rec.pet, dtype="<f4").tobytes())
    (patient_dir / _FILES["gtv"]).write_bytes(
        np.ascontiguousarray(rec.gtv, dtype=np.uint8).tobytes())
    (patient_dir / _FILES["nodes"]).write_bytes(
        np.ascontiguousarray(rec.nodes, dtype=np.uint8).tobytes())


def write_cohort(cohort_dir, records: List[PatientRecord]) -> None:
    cohort_dir = Path(cohort_dir)
    cohort_dir.mkdir(parents=True, exist_ok=True)
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids in cohort")
    _dump_json(cohort_dir / INDEX_NAME,
               {"format": FORMAT_NAME, "patients": ids})
    for rec in records:
        write_patient(cohort_dir / rec.patient_id, rec)


def _read_meta(patient_dir: Path) -> dict:
    meta = _load_json(patient_dir / META_NAME)
    for key in ("patient_id", "t_stage", "dims", "dtype", "files"):
        if key not in meta:
            raise DataError(f"{patient_dir / META_NAME}: missing field '{key}'")
    dims = meta["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(x, int) and x > 0 for x in dims)):
        raise DataError(f"{patient_dir / META_NAME}: bad dims {dims!r}")
    if meta["dtype"] != "f32le":
        raise DataError(f"{patient_dir / META_NAME}: unsupported dtype "
                        f"{meta['dtype']!r}")
    return meta


def _read_blob(path: Path, dtype, dims) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    want = int(np.prod(dims)) * np.dtype(dtype).itemsize
    if len(raw) != want:
        raise DataError(f"{path}: size mismatch, {len(raw)} bytes found, "
                        f"{want} expected for dims {tuple(dims)}")
    return np.frombuffer(raw, dtype=dtype).reshape(dims)


def read_patient(patient_dir) -> PatientRecord:
    patient_dir = Path(patient_dir)
    meta = _read_meta(patient_dir)
    dims = meta["dims"]
    files = meta["files"]
    ct = _read_blob(patient_dir / files["ct"], "<f4", dims).astype(np.float32)
    pet = _read_blob(patient_dir / files["pet"], "<f4", dims).astype(np.float32)
    gtv = _read_blob(patient_dir / files["gtv"], np.uint8, dims)
    nodes = _read_blob(patient_dir / files["nodes"], np.uint8, dims)
    return PatientRecord(patient_id=meta["patient_id"],
                         t_stage=int(meta["t_stage"]),
                         ct=ct, pet=pet, gtv=gtv.copy(), nodes=nodes.copy())


def read_cohort_index(cohort_dir) -> List[str]:
    cohort_dir = Path(cohort_dir)
    index = _load_json(cohort_dir / INDEX_NAME)
    if index.get("format") != FORMAT_NAME:
        raise DataError(f"{cohort_dir / INDEX_NAME}: not an {FORMAT_NAME} cohort")
    ids = index.get("patients")
    if not isinstance(ids, list) or not all(isinstance(x, str) for x in ids):
        raise DataError(f"{cohort_dir / INDEX_NAME}: bad patients list")
    if len(set(ids)) != len(ids):
        raise DataError(f"{cohort_dir / INDEX_NAME}: duplicate patient ids")
    return ids


def read_cohort(cohort_dir) -> List[PatientRecord]:
    cohort_dir = Path(cohort_dir)
    return [read_patient(cohort_dir / pid) for pid in read_cohort_index(cohort_dir)]


def read_cohort_stages(cohort_dir) -> List[tuple]:
    """(patient_id, t_stage) pairs from metadata only; no volume I/O."""
    cohort_dir = Path(cohort_dir)
    out = []
    for pid in read_cohort_index(cohort_dir):
        meta = _read_meta(cohort_dir / pid)
        if meta["patient_id"] != pid:
            raise DataError(f"{cohort_dir / pid}: meta patient_id "
                            f"{meta['patient_id']!r} does not match directory")
        out.append((pid, int(meta["t_stage"])))
    return out


def validate_cohort(cohort_dir) -> List[str]:
    """Structural check of an RV1 directory; returns findings (empty = clean).

    Covers: index integrity, metadata fields, blob sizes, mask binarity,
    finite image values, and id agreement between index, meta, and layout.
    """
    cohort_dir = Path(cohort_dir)
    findings: List[str] = []
    try:
        ids = read_cohort_index(cohort_dir)
    except DataError as exc:
        return [str(exc)]

    for pid in ids:
        pdir = cohort_dir / pid
        if not pdir.is_dir():
            findings.append(f"{pid}: patient directory missing")
            continue
        try:
            meta = _read_meta(pdir)
        except DataError as exc:
            findings.append(f"{pid}: {exc}")
            continue
        if meta["patient_id"] != pid:
            findings.append(f"{pid}: meta patient_id {meta['patient_id']!r} "
                            "does not match directory name")
        dims = meta["dims"]
        for key, dtype in [("ct", "<f4"), ("pet", "<f4"),
                           ("gtv", np.uint8), ("nodes", np.uint8)]:
            path = pdir / meta["files"].get(key, "")
            try:
                arr = _read_blob(path, dtype, dims)
            except DataError as exc:
                findings.append(f"{pid}: {exc}")
                continue
            if key in ("gtv", "nodes"):
                if not np.isin(arr, (0, 1)).all():
                    findings.append(f"{pid}: non-binary mask in {path.name}")
            elif not np.isfinite(arr).all():
                findings.append(f"{pid}: non-finite values in {path.name}")
    return findings
