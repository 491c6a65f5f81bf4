"""Command-line surface for the segmentation pipeline.

Subcommands cover the whole workflow: ``phantom`` (synthetic cohort
generation), ``validate`` (cohort structure checks), ``split``
(stratified manifest), ``train`` / ``grid`` (single-cell and full-grid
training from a JSON run config), ``eval`` (per-patient test metrics),
``predict`` (volume inference to raw blobs), and ``overlay``
(contour-rendered PPM export of one slice).

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 diverged training.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (Modality, WindowSpec, generate_phantom_cohort,
                   ground_truth_mask, minmax_norm, read_cohort,
                   read_cohort_stages, read_patient, stratified_split,
                   validate_cohort, window_ct, write_cohort, SplitManifest)
from .errors import DataError, DivergenceError
from .layers import UNetSpec
from .losses import LossKind
from .metrics import aggregate, format_table, write_patient_csv
from .optim import AdamConfig
from .trainer import (ExperimentConfig, GridSpec, evaluate_patients,
                      load_checkpoint, predict_volume, run_grid, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    """argparse reserves exit status 2 for usage errors, but this tool
    uses 2 for data problems; usage errors exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- flag value parsers ----------------------------------------------------------


def _dims_arg(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected D,H,W, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be integers, got {text!r}")


def _fractions_arg(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected a,b,c, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"fractions must be numbers, got {text!r}")


def _window_arg(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected WIDTH,CENTER, got {text!r}")
    try:
        return WindowSpec(width=float(parts[0]), center=float(parts[1]))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


# -- JSON run configs ------------------------------------------------------------


def _check_keys(doc: dict, allowed, context: str) -> None:
    if not isinstance(doc, dict):
        raise DataError(f"{context}: expected a JSON object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise DataError(f"{context}: unknown keys {unknown}")


def _require(doc: dict, key: str, context: str):
    if key not in doc:
        raise DataError(f"{context}: missing required key {key!r}")
    return doc[key]


def _load_config_doc(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return doc, path.resolve().parent


def _window_from_doc(doc, context: str):
    if doc is None:
        return None
    _check_keys(doc, {"width", "center"}, context)
    try:
        return WindowSpec(width=float(_require(doc, "width", context)),
                          center=float(_require(doc, "center", context)))
    except (TypeError, ValueError) as exc:
        raise DataError(f"{context}: {exc}") from exc


def _adam_from_doc(doc, context: str) -> AdamConfig:
    if doc is None:
        return AdamConfig()
    _check_keys(doc, {"learning_rate", "beta1", "beta2", "epsilon"}, context)
    try:
        return AdamConfig(**{k: float(v) for k, v in doc.items()})
    except (TypeError, ValueError) as exc:
        raise DataError(f"{context}: {exc}") from exc


def _experiment_from_doc(doc) -> ExperimentConfig:
    """Build one training configuration from the ``experiment`` section.

    The model's input-channel count is derived from the modality, so the
    ``unet`` subsection carries only depth and base_filters.
    """
    ctx = "experiment"
    _check_keys(doc, {"modality", "loss", "windowing", "seed", "unet",
                      "adam", "batch_size", "epochs", "eval_every"}, ctx)
    unet_doc = doc.get("unet") or {}
    _check_keys(unet_doc, {"depth", "base_filters"}, f"{ctx}.unet")
    try:
        modality = Modality(_require(doc, "modality", ctx))
        spec = UNetSpec(in_channels=modality.in_channels,
                        depth=int(unet_doc.get("depth", 2)),
                        base_filters=int(unet_doc.get("base_filters", 8)))
        return ExperimentConfig(
            modality=modality,
            loss=LossKind(_require(doc, "loss", ctx)),
            windowing=_window_from_doc(doc.get("windowing"), f"{ctx}.windowing"),
            seed=int(_require(doc, "seed", ctx)),
            unet=spec,
            adam=_adam_from_doc(doc.get("adam"), f"{ctx}.adam"),
            batch_size=int(doc.get("batch_size", 8)),
            epochs=int(doc.get("epochs", 40)),
            eval_every=int(doc.get("eval_every", 5)),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"{ctx}: {exc}") from exc


def _grid_from_doc(doc) -> GridSpec:
    ctx = "grid"
    _check_keys(doc, {"modalities", "losses", "windows", "seeds", "depth",
                      "base_filters", "adam", "batch_size", "epochs",
                      "eval_every"}, ctx)
    windows_doc = doc.get("windows", [None])
    if not isinstance(windows_doc, list):
        raise DataError(f"{ctx}.windows: expected a JSON array")
    try:
        return GridSpec(
            modalities=tuple(Modality(m)
                             for m in _require(doc, "modalities", ctx)),
            losses=tuple(LossKind(l) for l in _require(doc, "losses", ctx)),
            windows=tuple(_window_from_doc(w, f"{ctx}.windows[{i}]")
                          for i, w in enumerate(windows_doc)),
            seeds=tuple(int(s) for s in _require(doc, "seeds", ctx)),
            depth=int(doc.get("depth", 2)),
            base_filters=int(doc.get("base_filters", 8)),
            adam=_adam_from_doc(doc.get("adam"), f"{ctx}.adam"),
            batch_size=int(doc.get("batch_size", 8)),
            epochs=int(doc.get("epochs", 40)),
            eval_every=int(doc.get("eval_every", 5)),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"{ctx}: {exc}") from exc


def _load_run_config(path, section: str):
    """Common part of train/grid configs: cohort, out dir, split source.

    All relative paths resolve against the config file's directory.
    Exactly one of ``manifest`` (a JSON file path) or ``split``
    ({fractions, seed}, computed from cohort metadata) selects patients.
    """
    doc, base = _load_config_doc(path)
    allowed = {"cohort", "out", "manifest", "split", section}
    if section == "grid":
        allowed.add("workers")
    _check_keys(doc, allowed, str(path))
    cohort_dir = base / str(_require(doc, "cohort", "config"))
    out_dir = base / str(_require(doc, "out", "config"))
    if ("manifest" in doc) == ("split" in doc):
        raise DataError("config: give exactly one of 'manifest' or 'split'")
    if "manifest" in doc:
        manifest_path = base / str(doc["manifest"])
        try:
            manifest = SplitManifest.from_json(manifest_path.read_text())
        except OSError as exc:
            raise DataError(f"cannot read manifest: {exc}") from exc
    else:
        split_doc = doc["split"]
        _check_keys(split_doc, {"fractions", "seed"}, "config.split")
        try:
            fractions = tuple(float(f)
                              for f in _require(split_doc, "fractions",
                                                "config.split"))
            seed = int(_require(split_doc, "seed", "config.split"))
        except (TypeError, ValueError) as exc:
            raise DataError(f"config.split: {exc}") from exc
        try:
            manifest = stratified_split(read_cohort_stages(cohort_dir),
                                        fractions, seed)
        except ValueError as exc:
            raise DataError(f"config.split: {exc}") from exc
    workers = doc.get("workers")
    if workers is not None:
        workers = int(workers)
    return doc, cohort_dir, out_dir, manifest, workers


# -- subcommands -----------------------------------------------------------------


def cmd_phantom(args) -> int:
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise DataError(f"{out_dir} exists and is not empty "
                        "(pass --force to overwrite)")
    cohort = generate_phantom_cohort(args.patients, args.dims, args.seed)
    write_cohort(out_dir, cohort)
    total = int(np.prod(args.dims))
    for rec in cohort:
        positive = int(ground_truth_mask(rec).sum())
        print(f"{rec.patient_id}  stage T{rec.t_stage}  "
              f"gtv {int(rec.gtv.sum())}  nodes {int(rec.nodes.sum())}  "
              f"positive {positive}/{total} ({100.0 * positive / total:.2f}%)")
    print(f"wrote {len(cohort)} patients to {out_dir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    findings = validate_cohort(args.cohort)
    for finding in findings:
        print(finding)
    print(f"{len(findings)} findings")
    return EXIT_DATA if findings else EXIT_OK


def cmd_split(args) -> int:
    manifest = stratified_split(read_cohort_stages(args.cohort),
                                args.fractions, args.seed)
    Path(args.out).write_text(manifest.to_json())
    print(f"train {len(manifest.train)}  val {len(manifest.val)}  "
          f"test {len(manifest.test)}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc, cohort_dir, out_dir, manifest, _ = _load_run_config(args.config,
                                                             "experiment")
    config = _experiment_from_doc(_require(doc, "experiment", "config"))
    cell_hash = config.config_hash()
    print(f"config {cell_hash}")
    cohort = read_cohort(cohort_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "results").mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoints" / f"{cell_hash}.ckpt"
    result = train(config, cohort, manifest, checkpoint_path)
    (out_dir / "results" / f"{cell_hash}.json").write_text(
        json.dumps(result.to_json_dict(), sort_keys=True, indent=2) + "\n")
    for epoch, dice in result.validation_curve:
        print(f"epoch {epoch}: val dice {dice:.4f}")
    print(f"best val dice {result.best_validation_dice:.4f} "
          f"at epoch {result.epoch_of_best}")
    print(f"checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_grid(args) -> int:
    doc, cohort_dir, out_dir, manifest, cfg_workers = _load_run_config(
        args.config, "grid")
    grid = _grid_from_doc(_require(doc, "grid", "config"))
    for config in grid.cells():
        win = config.windowing
        print(f"config {config.config_hash()}  "
              f"modality={config.modality.value} loss={config.loss.value} "
              f"window={'none' if win is None else f'{win.width:g}/{win.center:g}'} "
              f"seed={config.seed}")
    cohort = read_cohort(cohort_dir)
    workers = args.workers if args.workers is not None else cfg_workers
    outcome = run_grid(grid, cohort, manifest, out_dir, workers=workers)
    if outcome.skipped:
        print(f"resumed: {outcome.skipped} cells already complete")
    diverged = sum(1 for r in outcome.results if r.status == "diverged")
    if diverged:
        print(f"warning: {diverged} cells diverged")
    print(outcome.report, end="")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, config, _ = load_checkpoint(args.checkpoint)
    cohort = read_cohort(args.cohort)
    manifest = SplitManifest.from_json(Path(args.manifest).read_text())
    table = {rec.patient_id: rec for rec in cohort}
    try:
        records = [table[pid] for pid in manifest.members(args.split)]
    except KeyError as exc:
        raise DataError(f"manifest names unknown patient {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not records:
        raise DataError(f"split {args.split!r} is empty")
    scored = evaluate_patients(model, records, config.modality,
                               config.windowing,
                               batch_size=config.batch_size)
    write_patient_csv(args.out, scored)
    print(format_table([(config.modality.display_name, aggregate(scored))]),
          end="")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _, config, header = load_checkpoint(args.checkpoint)
    rec = read_patient(args.patient)
    probs, mask = predict_volume(model, rec, config.modality,
                                 config.windowing,
                                 batch_size=config.batch_size)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "prob.f32").write_bytes(
        np.ascontiguousarray(probs, dtype="<f4").tobytes())
    (out_dir / "pred.u8").write_bytes(
        np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    meta = {
        "patient_id": rec.patient_id,
        "dims": list(rec.dims),
        "modality": config.modality.value,
        "windowing": config.to_json_dict()["windowing"],
        "config_hash": header["config_hash"],
        "positive_voxels": int(mask.sum()),
        "files": {"prob": "prob.f32", "pred": "pred.u8"},
    }
    (out_dir / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"{rec.patient_id}: {int(mask.sum())} predicted voxels")
    print(f"wrote {out_dir}")
    return EXIT_OK


def _read_prediction(pred_dir: Path, dims) -> np.ndarray:
    meta_path = pred_dir / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read prediction metadata: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: not valid JSON: {exc}") from exc
    if tuple(meta.get("dims", ())) != tuple(dims):
        raise DataError(f"prediction dims {meta.get('dims')} do not match "
                        f"patient dims {list(dims)}")
    pred_name = meta.get("files", {}).get("pred")
    if not isinstance(pred_name, str):
        raise DataError(f"{meta_path}: missing files.pred entry")
    blob = (pred_dir / pred_name).read_bytes()
    expected = int(np.prod(dims))
    if len(blob) != expected:
        raise DataError(f"prediction mask size mismatch: {len(blob)} bytes "
                        f"for dims {list(dims)}")
    return np.frombuffer(blob, dtype=np.uint8).reshape(dims)


def cmd_overlay(args) -> int:
    from .raster import render_overlay, write_ppm

    rec = read_patient(args.patient)
    pred = _read_prediction(Path(args.pred), rec.dims)
    if not 0 <= args.slice < rec.dims[0]:
        raise DataError(f"slice {args.slice} out of range for "
                        f"{rec.dims[0]} slices")
    if args.channel == "ct":
        base = (window_ct(rec.ct, args.window) if args.window is not None
                else minmax_norm(rec.ct))
    else:
        if args.window is not None:
            raise DataError("--window applies to the ct channel only")
        base = minmax_norm(rec.pet)
    truth = ground_truth_mask(rec)
    rgb = render_overlay(base[args.slice], truth[args.slice],
                         pred[args.slice])
    write_ppm(args.out, rgb)
    print(f"wrote {args.out} ({rgb.shape[1]}x{rgb.shape[0]})")
    return EXIT_OK


# -- parser wiring ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="petctseg",
                     description="Dual-modality tumor segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("phantom", help="generate a synthetic RV1 cohort")
    p.add_argument("--out", required=True, help="cohort output directory")
    p.add_argument("--patients", type=int, required=True,
                   help="number of patients to generate")
    p.add_argument("--dims", type=_dims_arg, required=True,
                   help="volume dims as D,H,W")
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("validate", help="check RV1 cohort structure")
    p.add_argument("--cohort", required=True, help="cohort directory")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("split", help="write a stratified split manifest")
    p.add_argument("--cohort", required=True, help="cohort directory")
    p.add_argument("--fractions", type=_fractions_arg, required=True,
                   help="train,val,test fractions summing to 1")
    p.add_argument("--seed", type=int, required=True, help="shuffle seed")
    p.add_argument("--out", required=True, help="manifest JSON path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True,
                   help="JSON run config with an 'experiment' section")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="run the experiment grid")
    p.add_argument("--config", required=True,
                   help="JSON run config with a 'grid' section")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel cells (default: config, then "
                        "SEG_NUM_WORKERS, then all cores)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--cohort", required=True, help="cohort directory")
    p.add_argument("--manifest", required=True, help="split manifest JSON")
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"), help="split to score")
    p.add_argument("--out", required=True, help="per-patient CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="run inference on one patient")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--patient", required=True, help="patient directory")
    p.add_argument("--out", required=True, help="prediction output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("overlay",
                       help="render one slice with truth/pred contours")
    p.add_argument("--patient", required=True, help="patient directory")
    p.add_argument("--pred", required=True,
                   help="prediction directory from 'predict'")
    p.add_argument("--slice", type=int, required=True, help="slice index")
    p.add_argument("--out", required=True, help="PPM output path")
    p.add_argument("--channel", choices=("ct", "pet"), default="ct",
                   help="background channel (default ct)")
    p.add_argument("--window", type=_window_arg, default=None,
                   help="CT display window as WIDTH,CENTER")
    p.set_defaults(func=cmd_overlay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # semantic flag problems (e.g. fractions that do not sum to 1)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
