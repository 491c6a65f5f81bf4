"""Training loop, checkpointing, and the hyperparameter-grid runner.

A trial trains one configuration on shuffled transversal slices, scores
the validation patients every few epochs by per-patient mean Dice, and
checkpoints whenever that score improves. The grid runner trains every
(modality, window, loss, seed) cell, resumes by config hash, selects the
best cell per modality by validation Dice alone, evaluates each champion
once on the test split, and renders the results table.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import (Modality, PatientRecord, SplitManifest, WindowSpec,
                   ground_truth_mask, make_slices)
from .errors import DataError, DivergenceError
from .layers import UNet, UNetSpec, build_unet
from .losses import LossKind, loss_fn
from .metrics import (PatientMetrics, aggregate, binarize, evaluate_patient,
                      format_table, write_patient_csv)
from .optim import Adam, AdamConfig
from .tensor import Tensor, no_grad

CHECKPOINT_MAGIC = b"SEGCKPT1"
DEFAULT_THRESHOLD = 0.5
WORKERS_ENV = "SEG_NUM_WORKERS"


# -- experiment configuration -------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """One grid cell: what to train, on which channels, with which loss."""

    modality: Modality
    loss: LossKind
    windowing: Optional[WindowSpec]
    seed: int
    unet: UNetSpec
    adam: AdamConfig = AdamConfig()
    batch_size: int = 8
    epochs: int = 40
    eval_every: int = 5

    def __post_init__(self):
        if self.modality is Modality.PET and self.windowing is not None:
            raise ValueError("windowing must be none for PET-only input")
        if self.unet.in_channels != self.modality.in_channels:
            raise ValueError(
                f"model takes {self.unet.in_channels} channels but modality "
                f"{self.modality.value} provides {self.modality.in_channels}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_json_dict(self) -> dict:
        window = None
        if self.windowing is not None:
            window = {"width": self.windowing.width,
                      "center": self.windowing.center}
        return {
            "modality": self.modality.value,
            "loss": self.loss.value,
            "windowing": window,
            "seed": self.seed,
            "unet": {"in_channels": self.unet.in_channels,
                     "depth": self.unet.depth,
                     "base_filters": self.unet.base_filters},
            "adam": {"learning_rate": self.adam.learning_rate,
                     "beta1": self.adam.beta1,
                     "beta2": self.adam.beta2,
                     "epsilon": self.adam.epsilon},
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "eval_every": self.eval_every,
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "ExperimentConfig":
        window = doc.get("windowing")
        return ExperimentConfig(
            modality=Modality(doc["modality"]),
            loss=LossKind(doc["loss"]),
            windowing=None if window is None else
            WindowSpec(width=window["width"], center=window["center"]),
            seed=int(doc["seed"]),
            unet=UNetSpec(**doc["unet"]),
            adam=AdamConfig(**doc["adam"]),
            batch_size=int(doc["batch_size"]),
            epochs=int(doc["epochs"]),
            eval_every=int(doc["eval_every"]),
        )

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TrialResult:
    config: ExperimentConfig
    config_hash: str
    status: str  # "ok" or "diverged"
    best_validation_dice: Optional[float]
    epoch_of_best: Optional[int]
    checkpoint_path: Optional[str]
    epoch_losses: Tuple[float, ...] = ()
    validation_curve: Tuple[Tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.status not in ("ok", "diverged"):
            raise ValueError(f"unknown trial status {self.status!r}")
        dice = self.best_validation_dice
        if dice is not None and not 0.0 <= dice <= 1.0:
            raise ValueError("best_validation_dice must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_json_dict(),
            "config_hash": self.config_hash,
            "status": self.status,
            "best_validation_dice": self.best_validation_dice,
            "epoch_of_best": self.epoch_of_best,
            "checkpoint_path": self.checkpoint_path,
            "epoch_losses": list(self.epoch_losses),
            "validation_curve": [list(p) for p in self.validation_curve],
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "TrialResult":
        return TrialResult(
            config=ExperimentConfig.from_json_dict(doc["config"]),
            config_hash=doc["config_hash"],
            status=doc["status"],
            best_validation_dice=doc["best_validation_dice"],
            epoch_of_best=doc["epoch_of_best"],
            checkpoint_path=doc["checkpoint_path"],
            epoch_losses=tuple(doc.get("epoch_losses", ())),
            validation_curve=tuple(
                (int(e), float(d)) for e, d in doc.get("validation_curve", ())),
        )


# -- checkpoint container ------------------------------------------------------


def _checkpoint_arrays(model: UNet, optimizer: Adam) -> List[Tuple[str, np.ndarray]]:
    """All serialized arrays in declaration order: model parameters,
    batch-norm running buffers, then Adam first/second moments."""
    arrays = [(f"param:{n}", p.data) for n, p in model.named_parameters()]
    arrays += [(f"state:{n}", a) for n, a in model.named_states()]
    names = [n for n, _ in model.named_parameters()]
    arrays += [(f"adam_m:{n}", m) for n, m in zip(names, optimizer.m)]
    arrays += [(f"adam_v:{n}", v) for n, v in zip(names, optimizer.v)]
    return arrays


def save_checkpoint(path, model: UNet, optimizer: Adam,
                    config: ExperimentConfig, epoch: int,
                    best_validation_dice: float) -> None:
    """Write the versioned container: magic, JSON header, then raw
    little-endian float32 blobs in header order."""
    arrays = _checkpoint_arrays(model, optimizer)
    for name, arr in arrays:
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoint arrays must be float32, got "
                             f"{arr.dtype} for '{name}'")
    header = {
        "format_version": 1,
        "config": config.to_json_dict(),
        "config_hash": config.config_hash(),
        "epoch": int(epoch),
        "best_validation_dice": float(best_validation_dice),
        "optimizer_t": int(optimizer.t),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(header_len).decode("utf-8"))


def load_checkpoint(path) -> Tuple[UNet, Adam, ExperimentConfig, dict]:
    """Rebuild model and optimizer exactly as saved. Returns the header
    dict as the fourth element (epoch, best dice, hash)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    config = ExperimentConfig.from_json_dict(header["config"])
    if config.config_hash() != header["config_hash"]:
        raise DataError(f"{path}: config hash does not match its config")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        arrays[entry["name"]] = data.reshape(shape).astype(np.float32)
    if offset != len(blob):
        raise DataError(f"{path}: trailing bytes after declared arrays")

    model = build_unet(config.unet, seed=config.seed)
    model.load_arrays({name.split(":", 1)[1]: arr
                       for name, arr in arrays.items()
                       if name.startswith(("param:", "state:"))})
    optimizer = Adam([p for _, p in model.named_parameters()], config.adam)
    names = [n for n, _ in model.named_parameters()]
    try:
        optimizer.load_state([arrays[f"adam_m:{n}"] for n in names],
                             [arrays[f"adam_v:{n}"] for n in names],
                             header["optimizer_t"])
    except KeyError as exc:
        raise DataError(f"{path}: missing optimizer array {exc}") from exc
    return model, optimizer, config, header


# -- inference and evaluation ---------------------------------------------------


def predict_volume(model: UNet, record: PatientRecord, modality: Modality,
                   window: Optional[WindowSpec] = None, *,
                   threshold: float = DEFAULT_THRESHOLD,
                   batch_size: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode slice-by-slice inference reassembled into a probability
    volume, plus its thresholded binary mask."""
    model.eval()
    samples = make_slices(record, modality, window=window)
    probs = np.zeros(record.dims, dtype=np.float32)
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = Tensor(np.stack([s.channels for s in chunk]))
            out = model.forward(x)
            probs[start:start + len(chunk)] = out.data[:, 0]
    return probs, binarize(probs, threshold)


def evaluate_patients(model: UNet, records: Sequence[PatientRecord],
                      modality: Modality, window: Optional[WindowSpec] = None,
                      *, threshold: float = DEFAULT_THRESHOLD,
                      batch_size: int = 8) -> List[PatientMetrics]:
    """Per-patient metrics over whole reassembled volumes."""
    out = []
    for rec in records:
        probs, _ = predict_volume(model, rec, modality, window,
                                  threshold=threshold, batch_size=batch_size)
        out.append(evaluate_patient(rec.patient_id, probs,
                                    ground_truth_mask(rec), threshold))
    return out


def _mean_validation_dice(model: UNet, records: Sequence[PatientRecord],
                          config: ExperimentConfig) -> float:
    scored = evaluate_patients(model, records, config.modality,
                               config.windowing,
                               batch_size=config.batch_size)
    values = [p.dice for p in scored if p.dice is not None]
    if not values:
        raise DataError("validation split yields no defined Dice values")
    return float(np.mean(values))


# -- training loop ---------------------------------------------------------------


def _records_by_id(cohort: Sequence[PatientRecord]) -> Dict[str, PatientRecord]:
    table = {rec.patient_id: rec for rec in cohort}
    if len(table) != len(cohort):
        raise DataError("cohort contains duplicate patient ids")
    return table


def _split_records(cohort: Sequence[PatientRecord], manifest: SplitManifest,
                   name: str) -> List[PatientRecord]:
    table = _records_by_id(cohort)
    try:
        return [table[pid] for pid in manifest.members(name)]
    except KeyError as exc:
        raise DataError(f"split manifest names unknown patient {exc}") from exc


def train(config: ExperimentConfig, cohort: Sequence[PatientRecord],
          manifest: SplitManifest, checkpoint_path) -> TrialResult:
    """Train one configuration; checkpoint at every validation improvement.

    The validation pass runs before any training (so a zero-epoch run
    still reports and checkpoints the initial model), then every
    ``eval_every`` epochs, and always after the final epoch. Raises
    DivergenceError the moment a minibatch loss goes non-finite.
    """
    train_records = _split_records(cohort, manifest, "train")
    val_records = _split_records(cohort, manifest, "val")
    if not train_records or not val_records:
        raise DataError("train and val splits must both be non-empty")

    samples = []
    for rec in train_records:
        samples.extend(make_slices(rec, config.modality, config.windowing))
    if not samples:
        raise DataError("training split yields no slices")

    model = build_unet(config.unet, seed=config.seed)
    optimizer = Adam([p for _, p in model.named_parameters()], config.adam)
    compute_loss = loss_fn(config.loss)
    rng = np.random.default_rng(config.seed)
    checkpoint_path = Path(checkpoint_path)
    checkpoint_path.parent.mkdir(parents=True, exist_ok=True)

    best_dice = _mean_validation_dice(model, val_records, config)
    best_epoch = 0
    validation_curve = [(0, best_dice)]
    save_checkpoint(checkpoint_path, model, optimizer, config, 0, best_dice)

    epoch_losses = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(samples))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            x = Tensor(np.stack([s.channels for s in batch]))
            y = Tensor(np.stack([s.mask for s in batch]))
            loss = compute_loss(model.forward(x), y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} "
                    f"(config {config.config_hash()[:12]})")
            loss.backward()
            optimizer.step()
            batch_losses.append(value)
        epoch_losses.append(float(np.mean(batch_losses)))

        if epoch % config.eval_every == 0 or epoch == config.epochs:
            dice = _mean_validation_dice(model, val_records, config)
            validation_curve.append((epoch, dice))
            if dice > best_dice:
                best_dice = dice
                best_epoch = epoch
                save_checkpoint(checkpoint_path, model, optimizer, config,
                                epoch, best_dice)

    return TrialResult(config=config, config_hash=config.config_hash(),
                       status="ok", best_validation_dice=best_dice,
                       epoch_of_best=best_epoch,
                       checkpoint_path=str(checkpoint_path),
                       epoch_losses=tuple(epoch_losses),
                       validation_curve=tuple(validation_curve))


# -- grid runner -------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Axes of the experiment grid plus shared training settings.

    PET-only cells always run unwindowed: the window axis applies to the
    modalities with a CT channel, and PET cells are emitted once per
    (loss, seed) pair with windowing none.
    """

    modalities: Tuple[Modality, ...]
    losses: Tuple[LossKind, ...]
    windows: Tuple[Optional[WindowSpec], ...]
    seeds: Tuple[int, ...]
    depth: int = 2
    base_filters: int = 8
    adam: AdamConfig = AdamConfig()
    batch_size: int = 8
    epochs: int = 40
    eval_every: int = 5

    def __post_init__(self):
        for name in ("modalities", "losses", "windows", "seeds"):
            axis = getattr(self, name)
            if not axis:
                raise ValueError(f"grid axis '{name}' is empty")
            if len(set(axis)) != len(axis):
                raise ValueError(f"grid axis '{name}' has duplicates")

    def cells(self) -> List[ExperimentConfig]:
        """Canonical cell order: modality, then window, loss, seed as
        listed. Ties in selection resolve to the earliest cell."""
        out = []
        for modality in self.modalities:
            windows = ((None,) if modality is Modality.PET else self.windows)
            for window in windows:
                for loss in self.losses:
                    for seed in self.seeds:
                        out.append(ExperimentConfig(
                            modality=modality, loss=loss, windowing=window,
                            seed=seed,
                            unet=UNetSpec(in_channels=modality.in_channels,
                                          depth=self.depth,
                                          base_filters=self.base_filters),
                            adam=self.adam, batch_size=self.batch_size,
                            epochs=self.epochs, eval_every=self.eval_every))
        return out


@dataclass
class GridOutcome:
    results: List[TrialResult]
    champions: Dict[Modality, TrialResult]
    test_metrics: Dict[Modality, List[PatientMetrics]]
    report: str
    skipped: int = 0  # cells satisfied from previous runs


def resolve_workers(explicit: Optional[int] = None) -> int:
    if explicit is not None:
        value = explicit
    elif os.environ.get(WORKERS_ENV):
        value = int(os.environ[WORKERS_ENV])
    else:
        value = os.cpu_count() or 1
    if value < 1:
        raise ValueError("worker count must be >= 1")
    return value


def select_champions(results: Sequence[TrialResult]) -> Dict[Modality, TrialResult]:
    """Per-modality argmax of validation Dice over successful trials.

    Iterates in the given (canonical) order with a strict improvement
    rule, so ties keep the earliest cell. Test scores play no part.
    """
    champions: Dict[Modality, TrialResult] = {}
    for result in results:
        if result.status != "ok":
            continue
        incumbent = champions.get(result.config.modality)
        if incumbent is None or \
                result.best_validation_dice > incumbent.best_validation_dice:
            champions[result.config.modality] = result
    return champions


def _run_cell(args) -> dict:
    """Grid worker: train one cell and persist its result JSON."""
    config, cohort, manifest, out_dir = args
    out_dir = Path(out_dir)
    cell_hash = config.config_hash()
    checkpoint = out_dir / "checkpoints" / f"{cell_hash}.ckpt"
    try:
        result = train(config, cohort, manifest, checkpoint)
    except DivergenceError:
        result = TrialResult(config=config, config_hash=cell_hash,
                             status="diverged", best_validation_dice=None,
                             epoch_of_best=None, checkpoint_path=None)
    doc = result.to_json_dict()
    result_path = out_dir / "results" / f"{cell_hash}.json"
    tmp = result_path.with_name(result_path.name + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, result_path)
    return doc


def _load_completed(out_dir: Path, config: ExperimentConfig) -> Optional[TrialResult]:
    """Resume accounting: a cell is done when its result JSON exists and,
    for successful trials, its checkpoint agrees with the config hash."""
    cell_hash = config.config_hash()
    result_path = out_dir / "results" / f"{cell_hash}.json"
    if not result_path.exists():
        return None
    result = TrialResult.from_json_dict(json.loads(result_path.read_text()))
    if result.config_hash != cell_hash:
        raise DataError(f"{result_path}: result does not match its config hash")
    if result.status == "ok":
        if result.checkpoint_path is None or not Path(result.checkpoint_path).exists():
            return None  # checkpoint lost; retrain the cell
        header = read_checkpoint_header(result.checkpoint_path)
        if header["config_hash"] != cell_hash:
            raise DataError(f"{result.checkpoint_path}: conflicting checkpoint "
                            f"for config hash {cell_hash[:12]}")
    return result


def run_grid(grid: GridSpec, cohort: Sequence[PatientRecord],
             manifest: SplitManifest, out_dir, *,
             workers: Optional[int] = None) -> GridOutcome:
    """Train all cells (resuming completed ones), select per-modality
    champions by validation Dice, evaluate them once on the test split,
    and write results.jsonl, report.txt, selection.json, and per-modality
    test CSVs under out_dir."""
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "results").mkdir(parents=True, exist_ok=True)
    cells = grid.cells()
    hashes = [c.config_hash() for c in cells]
    if len(set(hashes)) != len(hashes):
        raise ValueError("grid cells are not unique")

    completed: Dict[str, TrialResult] = {}
    pending: List[ExperimentConfig] = []
    for config, cell_hash in zip(cells, hashes):
        previous = _load_completed(out_dir, config)
        if previous is None:
            pending.append(config)
        else:
            completed[cell_hash] = previous
    skipped = len(completed)

    needed_ids = set(manifest.members("train")) | set(manifest.members("val"))
    train_cohort = [rec for rec in cohort if rec.patient_id in needed_ids]
    worker_count = resolve_workers(workers)
    jobs = [(config, train_cohort, manifest, str(out_dir))
            for config in pending]
    if jobs:
        if worker_count == 1:
            docs = [_run_cell(job) for job in jobs]
        else:
            with ProcessPoolExecutor(max_workers=worker_count) as pool:
                docs = list(pool.map(_run_cell, jobs))
        for doc in docs:
            completed[doc["config_hash"]] = TrialResult.from_json_dict(doc)

    results = [completed[h] for h in hashes]
    with open(out_dir / "results.jsonl", "w") as fh:
        for result in results:
            fh.write(json.dumps(result.to_json_dict(), sort_keys=True) + "\n")

    champions = select_champions(results)
    test_records = _split_records(cohort, manifest, "test")
    test_metrics: Dict[Modality, List[PatientMetrics]] = {}
    rows = []
    selection_doc = {}
    for modality in grid.modalities:
        champion = champions.get(modality)
        if champion is None:
            continue
        model, _, config, _ = load_checkpoint(champion.checkpoint_path)
        scored = evaluate_patients(model, test_records, config.modality,
                                   config.windowing,
                                   batch_size=config.batch_size)
        test_metrics[modality] = scored
        summaries = aggregate(scored)
        rows.append((modality.display_name, summaries))
        write_patient_csv(out_dir / f"test_metrics_{modality.value}.csv", scored)
        selection_doc[modality.value] = {
            "config_hash": champion.config_hash,
            "best_validation_dice": champion.best_validation_dice,
            "checkpoint": champion.checkpoint_path,
            "test": {name: {"mean": s.mean, "std": s.std, "count": s.count}
                     for name, s in summaries.items()},
        }

    report = format_table(rows)
    (out_dir / "report.txt").write_text(report)
    (out_dir / "selection.json").write_text(
        json.dumps(selection_doc, sort_keys=True, indent=2) + "\n")
    return GridOutcome(results=results, champions=champions,
                       test_metrics=test_metrics, report=report,
                       skipped=skipped)
