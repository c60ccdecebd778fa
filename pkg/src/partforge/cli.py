"""Command-line entry point: ``partforge <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__

log = logging.getLogger("partforge")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SNAPSHOT_SUFFIX = ".config.json"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _thread_limit():
    raw = os.environ.get("PARTFORGE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"PARTFORGE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError("PARTFORGE_THREADS must be >= 0")
    if n == 0:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _write_snapshot(path: Path, resolved: dict) -> None:
    from .voxelgrid import atomic_write_bytes

    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, (json.dumps(resolved, indent=1, sort_keys=True) + "\n").encode())


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise CliError(f"config file {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in doc.items()}


def _resolve(args: argparse.Namespace, keys, defaults: dict, file_cfg: dict) -> dict:
    """flag > config file > default, for each key."""
    out = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = defaults[key]
    return out


def _floats(text: str, n: int, what: str) -> list[float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"{what} needs {n} comma-separated numbers")
    return [float(p) for p in parts]


def _box(text):
    return _floats(text, 6, "--box")


def _fractions(text):
    return _floats(text, 3, "--splits")


def _taxonomy(path):
    from .taxonomy import default_taxonomy, read_taxonomy

    return read_taxonomy(path) if path else default_taxonomy()


# ---------------------------------------------------------------------------
# gen-data

GEN_DEFAULTS = {
    "classes": None, "count": 100, "seed": 0, "resolution": 32,
    "crop_prob": 0.0, "crop_depth": 0.0, "part_drop": 0.0, "dropout": 0.0,
    "splits": [0.7, 0.15, 0.15], "taxonomy": None,
}


def cmd_gen_data(args) -> int:
    from .synthdata import TEMPLATES, CorruptionParams, generate_dataset, write_dataset

    cfg = _resolve(args, GEN_DEFAULTS, GEN_DEFAULTS, _read_config(args.config))
    tax = _taxonomy(cfg["taxonomy"])
    classes = cfg["classes"]
    if classes is None:
        classes = [c for c in tax.classes if c in TEMPLATES]
    elif isinstance(classes, str):
        classes = [c.strip() for c in classes.split(",") if c.strip()]
    for c in classes:
        if c not in tax.classes:
            raise CliError(f"unknown class {c!r}")
    corruption = CorruptionParams(cfg["crop_prob"], cfg["crop_depth"], cfg["part_drop"], cfg["dropout"], cfg["seed"])
    ds = generate_dataset(classes, int(cfg["count"]), int(cfg["seed"]), int(cfg["resolution"]), tax,
                          corruption, tuple(cfg["splits"]))
    out = Path(args.out)
    write_dataset(ds, out)
    cfg["classes"] = list(classes)
    _write_snapshot(out / f"gen-data{SNAPSHOT_SUFFIX}", cfg)
    counts = {s: sum(1 for v in ds.splits.values() if v == s) for s in ("train", "val", "test")}
    print(f"wrote {len(ds)} samples to {out} (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# build-priors

PRIOR_DEFAULTS = {"k": 10, "seed": 0, "split": "train"}


def cmd_build_priors(args) -> int:
    from .priorbank import build_prior_bank
    from .synthdata import canonical_masks_by_type, read_dataset

    cfg = _resolve(args, PRIOR_DEFAULTS, PRIOR_DEFAULTS, _read_config(args.config))
    ds = read_dataset(args.data)
    samples = ds.split(cfg["split"])
    if not samples:
        raise CliError(f"split {cfg['split']!r} of {args.data} is empty")
    bank, assignment = build_prior_bank(canonical_masks_by_type(samples), int(cfg["k"]), int(cfg["seed"]),
                                        ds.taxonomy.n_part_types)
    for w in assignment.warnings:
        log.warning(w)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bank.save(out)
    cfg.update({"data": str(args.data), "n_samples": len(samples), "bank_sha256": bank.digest(),
                "omitted_types": bank.omitted_types})
    _write_snapshot(out.with_name(out.name + SNAPSHOT_SUFFIX), cfg)
    print(f"wrote {bank.total_priors} priors over {len(bank.present_types)} part types to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from dataclasses import fields

    from .priorbank import PriorBank
    from .synthdata import read_dataset
    from .trainer import TrainConfig, train

    file_cfg = _read_config(args.config)
    defaults = TrainConfig().to_dict()
    keys = [f.name for f in fields(TrainConfig)]
    unknown = set(file_cfg) - set(keys)
    if unknown:
        raise CliError(f"unknown keys in {args.config}: {sorted(unknown)}")
    ds = read_dataset(args.data)
    if args.resolution is None and "resolution" not in file_cfg:
        defaults["resolution"] = ds.resolution
    cfg = _resolve(args, keys, defaults, file_cfg)
    config = TrainConfig.from_dict(cfg)
    bank = None
    if args.priors:
        bank = PriorBank.load(args.priors)
    elif not config.no_priors:
        raise CliError("--priors is required unless --no-priors is set")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(out / f"train{SNAPSHOT_SUFFIX}", {**config.to_dict(), "data": str(args.data),
                                                       "priors": args.priors})
    result = train(config, ds, bank, out, resume=args.resume)
    last = result.log[-1] if result.log else None
    if last:
        print(f"trained {result.state.epoch} epochs; last train total {last['train']['total']:.4f}; "
              f"best epoch {result.state.best_epoch}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def _load_points(path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        pts = np.load(p)
    else:
        pts = np.loadtxt(p, ndmin=2)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise CliError(f"{path}: expected an (N, 3) point array")
    return pts[:, :3]


def _prediction_record(oid, pred, taxonomy, out: Path, export_obj: bool):
    from .voxelgrid import grid_to_obj, save_grid

    kept = [k for k in pred.kept() if pred.nodes[k].refined is not None]
    obj_dir = out / oid
    obj_dir.mkdir(parents=True, exist_ok=True)
    parts, grids, names = [], [], []
    for rank, k in enumerate(kept):
        node = pred.nodes[k]
        mask = node.refined.binarize()
        rel = f"{oid}/part{rank:02d}.pfvg"
        save_grid(mask, out / rel)
        name = taxonomy.part_types[node.part_type]
        parts.append({"node": k, "type": name, "existence": round(node.existence, 6), "mask": rel,
                      "voxels": mask.count()})
        grids.append(mask)
        names.append(f"{rank:02d}_{name}")
    adj = pred.adjacency()
    if export_obj and grids:
        (obj_dir / "parts.obj").write_text(grid_to_obj(grids, names))
    return {
        "id": oid, "class": pred.class_name, "rotation": pred.rotation,
        "confidence": round(pred.confidence, 6), "parts": parts,
        "adjacency": [[int(i), int(j)] for i, j in zip(*np.nonzero(np.triu(adj, 1)))],
    }


def cmd_infer(args) -> int:
    from .model import load_model
    from .priorbank import PriorBank
    from .synthdata import read_dataset
    from .voxelgrid import atomic_write_bytes, load_grid, voxelize_points

    model = load_model(args.model)
    r = model.config.resolution
    bank = PriorBank.load(args.priors) if args.priors else None
    if bank is None and not model.config.no_priors:
        raise CliError("--priors is required for a model trained with priors")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        ds = read_dataset(args.data)
        taxonomy = ds.taxonomy
        samples = ds.split(args.split) if args.split != "all" else ds.samples
        jobs = [(s.sample_id, s.scan, s.class_name) for s in samples]
    else:
        if not args.class_name:
            raise CliError("--class is required with --scan or --points")
        taxonomy = _taxonomy(args.taxonomy)
        if args.scan:
            scan = load_grid(args.scan)
        elif args.points:
            if args.box is None:
                raise CliError("--box is required with --points")
            scan = voxelize_points(_load_points(args.points), args.box[:3], args.box[3:], r)
        else:
            raise CliError("one of --data, --scan or --points is required")
        jobs = [(args.id, scan, args.class_name)]
    records = []
    for i in range(0, len(jobs), args.batch_size):
        chunk = jobs[i:i + args.batch_size]
        preds = model.predict([s for _, s, _ in chunk], [c for _, _, c in chunk], taxonomy, bank,
                              threshold=args.threshold)
        for (oid, _, _), pred in zip(chunk, preds):
            records.append(_prediction_record(oid, pred, taxonomy, out, not args.no_obj))
    doc = {"version": 1, "resolution": r, "taxonomy_sha256": taxonomy.digest(), "objects": records}
    atomic_write_bytes(out / "predictions.json", (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())
    _write_snapshot(out / f"infer{SNAPSHOT_SUFFIX}", {
        "model": str(args.model), "priors": args.priors, "data": args.data, "split": args.split,
        "scan": args.scan, "points": args.points, "box": args.box, "class": args.class_name,
        "threshold": args.threshold,
    })
    if len(records) == 1:
        rec = records[0]
        print(f"{rec['id']}: class {rec['class']}, rotation bin {rec['rotation']}, {len(rec['parts'])} parts")
        for p in rec["parts"]:
            print(f"  {p['type']:<16} p={p['existence']:.3f} voxels={p['voxels']}")
    else:
        print(f"wrote predictions for {len(records)} objects to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def read_predictions(path, taxonomy):
    from .metrics import PredictedObject
    from .voxelgrid import load_grid

    root = Path(path)
    doc_path = root / "predictions.json" if root.is_dir() else root
    try:
        doc = json.loads(doc_path.read_text())
    except FileNotFoundError:
        raise CliError(f"predictions not found: {doc_path}") from None
    base = doc_path.parent
    out = []
    for rec in doc["objects"]:
        parts = []
        for p in rec["parts"]:
            f = base / p["mask"]
            if not f.exists():
                raise CliError(f"missing predicted mask: {f}")
            parts.append((taxonomy.part_index(p["type"]), load_grid(f)))
        out.append(PredictedObject(rec["id"], rec["class"], parts, float(rec.get("confidence", 1.0))))
    return out


def cmd_eval(args) -> int:
    from .metrics import evaluate, format_report
    from .synthdata import read_dataset
    from .voxelgrid import atomic_write_bytes

    ds = read_dataset(args.gt)
    preds = read_predictions(args.pred, ds.taxonomy)
    samples = ds.samples if args.split == "all" else ds.split(args.split)
    if args.only_predicted:
        ids = {p.object_id for p in preds}
        samples = [s for s in samples if s.sample_id in ids]
    gt = {s.sample_id: (s.class_name, list(s.target.parts), s.scan) for s in samples}
    report = evaluate(preds, gt, ds.taxonomy, args.mode)
    text = format_report(report)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out, report.to_json().encode())
        atomic_write_bytes(out.with_suffix(".txt"), text.encode())
    return EXIT_OK


# ---------------------------------------------------------------------------
# export-mesh


def cmd_export_mesh(args) -> int:
    from .voxelgrid import atomic_write_bytes, grid_to_obj, load_grid

    grids = [load_grid(p) for p in args.grid]
    names = [Path(p).stem for p in args.grid]
    text = grid_to_obj(grids, names, threshold=args.threshold)
    atomic_write_bytes(args.out, text.encode())
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partforge", description="Semantic part completion from partial voxel scans.")
    p.add_argument("--version", action="version", version=f"partforge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a synthetic dataset and manifest")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--config", help="YAML/JSON file with defaults for the flags below")
    g.add_argument("--classes", help="comma-separated class names (default: all with a template)")
    g.add_argument("--count", type=int, help="number of samples (default 100)")
    g.add_argument("--seed", type=int, help="generation seed (default 0)")
    g.add_argument("--resolution", type=int, choices=(16, 32, 64), help="grid resolution (default 32)")
    g.add_argument("--crop-prob", type=float, help="probability of a half-space crop (default 0)")
    g.add_argument("--crop-depth", type=float, help="max fraction of extent removed by a crop (default 0)")
    g.add_argument("--part-drop", type=float, help="per-part drop probability (default 0)")
    g.add_argument("--dropout", type=float, help="per-voxel dropout rate (default 0)")
    g.add_argument("--splits", type=_fractions, help="train,val,test fractions (default 0.7,0.15,0.15)")
    g.add_argument("--taxonomy", help="taxonomy document (default: built-in)")
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-priors", help="cluster train-split part masks into a prior bank")
    b.add_argument("--data", required=True, help="dataset directory or manifest")
    b.add_argument("--out", required=True, help="output .pfpb file")
    b.add_argument("--config", help="YAML/JSON file with defaults for the flags below")
    b.add_argument("--k", type=int, help="clusters per part type (default 10)")
    b.add_argument("--seed", type=int, help="k-means++ seed (default 0)")
    b.add_argument("--split", choices=("train", "val", "test"), help="split to cluster (default train)")
    b.set_defaults(func=cmd_build_priors)

    t = sub.add_parser("train", help="train the part completion model")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--priors", help=".pfpb prior bank (required unless --no-priors)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", help="YAML/JSON file with train settings")
    t.add_argument("--resume", action="store_true", help="continue from OUT/last if present")
    t.add_argument("--batch-size", type=int, help="objects per step (default 24)")
    t.add_argument("--lr", type=float, help="base learning rate (default 0.001)")
    t.add_argument("--weight-decay", type=float, help="decoupled weight decay (default 0.01)")
    t.add_argument("--decay-factor", type=float, help="lr decay factor (default 0.8)")
    t.add_argument("--decay-every", type=int, help="epochs between lr decays (default 8)")
    t.add_argument("--pretrain-epochs", type=int, help="clean-box epochs (default 20)")
    t.add_argument("--finetune-epochs", type=int, help="jitter/corruption epochs (default 10)")
    t.add_argument("--seed", type=int, help="initialization and shuffling seed (default 0)")
    t.add_argument("--resolution", type=int, choices=(16, 32, 64), help="grid resolution (default: dataset's)")
    t.add_argument("--grad-clip", type=float, help="global gradient norm limit (default 10)")
    t.add_argument("--jitter", type=float, help="fine-tune box jitter fraction per axis (default 0.1)")
    for flag, text in [("--no-priors", "decode masks directly without priors"),
                       ("--no-message-passing", "replace message passing by a padded pass-through"),
                       ("--no-refine", "use the coarse prior mask as the final mask"),
                       ("--refine-absolute", "final mask from the refiner residual alone"),
                       ("--refine-additive", "final mask = clip(coarse + residual)")]:
        t.add_argument(flag, action="store_const", const=True, default=None, help=text)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict part trees and masks")
    i.add_argument("--model", required=True, help="model directory (model.json + model.pfck)")
    i.add_argument("--priors", help=".pfpb prior bank")
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--data", help="dataset directory or manifest for batch inference")
    i.add_argument("--split", default="test", choices=("train", "val", "test", "all"),
                   help="split to run with --data (default test)")
    i.add_argument("--scan", help="single .pfvg scan grid")
    i.add_argument("--points", help="point file (.npy or xyz text) to voxelize inside --box")
    i.add_argument("--box", type=_box, help="minx,miny,minz,maxx,maxy,maxz of the object box")
    i.add_argument("--class", dest="class_name", help="object class of the single scan")
    i.add_argument("--id", default="object", help="object id for a single scan (default object)")
    i.add_argument("--taxonomy", help="taxonomy document for a single scan (default: built-in)")
    i.add_argument("--threshold", type=float, default=0.5, help="existence threshold (default 0.5)")
    i.add_argument("--batch-size", type=int, default=16, help="objects per forward pass (default 16)")
    i.add_argument("--no-obj", action="store_true", help="skip OBJ export")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="prediction directory or predictions.json")
    e.add_argument("--gt", required=True, help="ground-truth dataset directory or manifest")
    e.add_argument("--mode", default="completion", choices=("completion", "segmentation", "instance"),
                   help="evaluation protocol (default completion)")
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"),
                   help="ground-truth split to score (default test)")
    e.add_argument("--only-predicted", action="store_true", help="score only objects present in --pred")
    e.add_argument("--out", help="write the report as JSON (and .txt alongside)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-mesh", help="write voxel grids as an OBJ cube mesh")
    x.add_argument("grid", nargs="+", help=".pfvg files")
    x.add_argument("--out", required=True, help="output .obj file")
    x.add_argument("--threshold", type=float, default=0.5, help="occupancy threshold (default 0.5)")
    x.set_defaults(func=cmd_export_mesh)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .autodiff.checkpoint import CheckpointError
    from .synthdata import ManifestError
    from .taxonomy import TaxonomyError
    from .voxelgrid import GridFormatError

    try:
        limit = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limit is not None:
                limit.restore_original_limits()
    except (CliError, OSError, GridFormatError, CheckpointError, ManifestError, TaxonomyError,
            ValueError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"partforge: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
