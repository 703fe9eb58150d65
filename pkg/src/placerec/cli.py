"""``placerec`` command line: one binary, one subcommand per pipeline step.

Exit codes: 0 ok, 2 parse error, 3 constraint violation, 4 numeric failure,
5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import RankDeficientError, pca_apply, pca_fit
from .aggregation.pca import PcaModel
from .featureio import FormatError, read_checkpoint, read_feature, write_checkpoint
from .retrieval import DescriptorDb, GroundTruth, build_db, evaluate
from .selfcheck import CHECKS, check_all
from .sla import (
    GridConfig,
    PatchCorrelationMatcher,
    RecordError,
    build_unified_labels,
    class_counts,
    read_labels,
    read_records,
    write_labels,
    write_records,
)
from .synthbench import WorldSpec, generate, query_db_split, write_world
from .training import (
    HEAD_CHOICES,
    BatchSpec,
    InsufficientClassesError,
    NonFiniteLossError,
    PlaceModel,
    TrainConfig,
    build_model,
    train_stage1,
    train_stage2_ft2,
)

log = logging.getLogger("placerec")

EXIT_OK, EXIT_PARSE, EXIT_CONSTRAINT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- helpers -------------------------------------------------------------------------

def _feature_path(features_dir: Path, image_id: str) -> Path:
    return features_dir / f"{image_id}.spfm"


def _load_maps(features_dir: Path, image_ids) -> np.ndarray:
    maps = []
    for iid in image_ids:
        path = _feature_path(features_dir, iid)
        if not path.exists():
            raise CliError(f"no feature file for {iid!r} ({path})", EXIT_IO)
        maps.append(read_feature(path).values)
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise CliError(f"feature maps differ in shape: {sorted(shapes)}", EXIT_CONSTRAINT)
    return np.stack(maps)


def _with_stage_suffix(path: Path, tag: str) -> Path:
    return path.with_name(f"{path.stem}.{tag}{path.suffix}")


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


def save_pca(path, model: PcaModel) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, mean=model.mean, basis=model.basis, explained_variance=model.explained_variance)


def load_pca(path) -> PcaModel:
    with np.load(path) as z:
        return PcaModel(z["mean"], z["basis"], z["explained_variance"])


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = WorldSpec(n_places=args.places, imgs_per_place=args.images, C=args.channels, H=args.height,
                     W=args.width, intra_noise=args.noise, inter_separation=args.separation, seed=args.seed,
                     spacing=args.spacing, nuisance_fraction=args.nuisance_fraction, dataset=args.dataset)
    world = generate(spec)
    write_world(world, args.out)
    print(f"wrote {len(world.records)} feature maps and records.csv to {args.out}")
    if args.query_images:
        if args.query_images >= args.images:
            raise CliError("--query-images must leave at least one database image per place", EXIT_CONSTRAINT)
        queries, db = query_db_split(world, args.images - args.query_images)
        write_records(Path(args.out) / "database.csv", db.records)
        write_records(Path(args.out) / "queries.csv", queries.records)
        print(f"split: {len(db.records)} database records, {len(queries.records)} query records")
    return EXIT_OK


def cmd_align(args) -> int:
    cfg = GridConfig(args.M, args.alpha, args.N, args.L)
    records = read_records(args.records)
    matcher = None
    if any(r.dataset == "P" for r in records):
        if args.features_dir is None:
            raise CliError("P records need --features-dir for panorama matching", EXIT_CONSTRAINT)
        ids = [r.image_id for r in records if r.dataset == "P"]
        matcher = PatchCorrelationMatcher(dict(zip(ids, _load_maps(args.features_dir, ids))))
    labels = build_unified_labels(records, None, cfg, matcher, args.min_inliers, args.min_images, args.threads)
    write_labels(args.out, labels)
    print(f"{'source':<8}{'classes':>10}{'images':>10}")
    for source, (n_cls, n_img) in class_counts(labels).items():
        print(f"{source:<8}{n_cls:>10}{n_img:>10}")
    print(f"dropped {len(records) - len(labels)} of {len(records)} records")
    return EXIT_OK


def cmd_train(args) -> int:
    stage = args.stage or ("both" if args.head == "nvl-ft2" else "1")
    if stage != "1" and args.head != "nvl-ft2":
        raise CliError(f"--stage {stage} is only defined for --head nvl-ft2", EXIT_CONSTRAINT)
    if stage == "2" and args.init is None:
        raise CliError("--stage 2 needs --init <stage-1 checkpoint>", EXIT_CONSTRAINT)
    if args.batch % args.images_per_place:
        raise CliError("--batch must be a multiple of --images-per-place", EXIT_CONSTRAINT)
    if args.lr == 0:
        log.warning("--lr 0: parameters will be written back unchanged")

    labels = read_labels(args.labels)
    maps = _load_maps(args.features_dir, [lab.image_id for lab in labels])
    cfg = TrainConfig(lr=args.lr, epochs_stage1=args.epochs, epochs_stage2=args.stage2_epochs,
                      warmup_steps=args.warmup)
    spec = BatchSpec(args.batch // args.images_per_place, args.images_per_place, args.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")

    with open(log_path, "w", encoding="utf-8") as log_fh:
        def sink(entry):
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")

        try:
            if stage in ("1", "both"):
                model = build_model(args.head, maps.shape[1], rank=args.rank, clusters=args.clusters,
                                    out_per_cluster=args.out_per_cluster, with_cls=args.with_cls,
                                    backbone_blocks=args.backbone_blocks, n_trainable_tail=args.trainable_tail,
                                    init_maps=maps, rng=args.seed)
                r1 = train_stage1(model, maps, labels, cfg, spec, log_sink=sink)
                path1 = _with_stage_suffix(out, "stage1") if stage == "both" else out
                write_checkpoint(path1, r1.checkpoint)
                print(f"stage 1: {r1.trainable_count} trainable values, final loss "
                      f"{r1.epoch_losses[-1]:.4f} -> {path1}")
                ckpt = r1.checkpoint
            else:
                ckpt = read_checkpoint(args.init)
            if stage in ("2", "both"):
                r2 = train_stage2_ft2(ckpt, maps, labels, cfg, spec, log_sink=sink)
                write_checkpoint(out, r2.checkpoint)
                print(f"stage 2: {r2.trainable_count} trainable values, final loss "
                      f"{r2.epoch_losses[-1]:.4f} -> {out}")
        except NonFiniteLossError as exc:
            saved = _with_stage_suffix(out, "last-good")
            write_checkpoint(saved, exc.checkpoint)
            raise CliError(f"{exc}; last good checkpoint written to {saved}", EXIT_NUMERIC) from None
        except InsufficientClassesError as exc:
            raise CliError(str(exc), EXIT_CONSTRAINT) from None
    print(f"training log -> {log_path}")
    return EXIT_OK


def _image_metadata(args, image_ids):
    meta = {iid: {"image_id": iid} for iid in image_ids}
    if args.records:
        for r in read_records(args.records):
            if r.image_id in meta:
                meta[r.image_id].update(east=r.east, north=r.north)
    if args.meta:
        with open(args.meta, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        d = json.loads(line)
                        iid = str(d["image_id"])
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise RecordError(f"bad metadata line ({exc})", n) from None
                    if iid in meta:
                        meta[iid].update(d)
    return [meta[iid] for iid in image_ids]


def cmd_extract(args) -> int:
    model = PlaceModel.from_checkpoint(read_checkpoint(args.ckpt))
    if args.records:
        ids = [r.image_id for r in read_records(args.records)
               if _feature_path(args.features_dir, r.image_id).exists()]
    else:
        ids = sorted(p.stem for p in args.features_dir.glob("*.spfm"))
    if not ids:
        raise CliError(f"no feature files found in {args.features_dir}", EXIT_IO)
    maps = _load_maps(args.features_dir, ids)
    db = build_db(model.describe(maps), _image_metadata(args, ids))
    db.save(args.out)
    print(f"wrote {db.N} descriptors of dimension {db.D} to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    db = DescriptorDb.load(args.db)
    queries = DescriptorDb.load(args.queries)
    gt = GroundTruth(args.regime, args.threshold)
    try:
        report = evaluate(db, queries.vectors, queries.metadata, gt, args.ks, shards=args.shards,
                          threads=args.threads)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONSTRAINT) from None
    print(report.to_json() if args.format == "json" else report.to_table())
    return EXIT_OK


def cmd_pca(args) -> int:
    db = DescriptorDb.load(args.db)
    try:
        model = pca_fit(db.vectors, args.dim)
    except RankDeficientError as exc:
        raise CliError(str(exc), EXIT_CONSTRAINT) from None
    save_pca(args.out, model)
    print(f"PCA {model.in_dim} -> {model.out_dim} written to {args.out}")
    for src, dst in args.project or []:
        other = DescriptorDb.load(src)
        projected = build_db(pca_apply(model, other.vectors), other.metadata)
        projected.save(dst)
        print(f"projected {src} -> {dst}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = CHECKS if args.head == "all" else (args.head,)
    reports = check_all(names, range(args.seeds), args.tol)
    for r in reports:
        print(r)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERIC


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="placerec", description="Visual place recognition toolkit.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    parser.add_argument("--threads", type=int, default=1, help="worker threads (1 is the deterministic mode)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic world", formatter_class=fmt)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--places", type=int, default=200, help="number of places")
    p.add_argument("--images", type=int, default=6, help="images per place")
    p.add_argument("--channels", type=int, default=32, help="feature channels C")
    p.add_argument("--height", type=int, default=4, help="feature map height H")
    p.add_argument("--width", type=int, default=4, help="feature map width W")
    p.add_argument("--noise", type=float, default=0.1, help="intra-place noise sigma")
    p.add_argument("--separation", type=float, default=1.0, help="prototype scale")
    p.add_argument("--spacing", type=float, default=50.0, help="meters between places")
    p.add_argument("--nuisance-fraction", type=float, default=0.0, help="fraction of pure-noise channels")
    p.add_argument("--dataset", default="M", choices=["M", "S", "P", "G"], help="dataset tag of the records")
    p.add_argument("--query-images", type=int, default=0,
                   help="if > 0, also write database.csv and queries.csv with this many query images per place")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("align", help="unify geographic supervision into class labels", formatter_class=fmt)
    p.add_argument("--records", type=Path, required=True, help="GeoRecord CSV or JSON-lines file")
    p.add_argument("--out", type=Path, required=True, help="output labels (JSON lines)")
    p.add_argument("--M", type=float, default=10.0, help="grid cell size in meters")
    p.add_argument("--alpha", type=float, default=30.0, help="heading bin width in degrees")
    p.add_argument("--N", type=int, default=5, help="spatial group modulus")
    p.add_argument("--L", type=int, default=2, help="heading group modulus")
    p.add_argument("--min-inliers", type=int, default=20, help="panorama match threshold")
    p.add_argument("--min-images", type=int, default=2, help="smallest class kept")
    p.add_argument("--features-dir", type=Path, default=None, help="feature maps, needed for P records")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train an aggregation head", formatter_class=fmt)
    p.add_argument("--labels", type=Path, required=True, help="labels from `align`")
    p.add_argument("--features-dir", type=Path, required=True, help="directory of <image_id>.spfm files")
    p.add_argument("--head", choices=HEAD_CHOICES, default="g2m", help="aggregation head")
    p.add_argument("--stage", choices=["1", "2", "both"], default=None,
                   help="training stage; unset means both for nvl-ft2 and 1 otherwise")
    p.add_argument("--init", type=Path, default=None, help="stage-1 checkpoint for --stage 2")
    p.add_argument("--lr", type=float, default=6e-5, help="Adam learning rate")
    p.add_argument("--warmup", type=int, default=0, help="linear warmup steps")
    p.add_argument("--batch", type=int, default=64, help="images per batch")
    p.add_argument("--images-per-place", type=int, default=4, help="images per class in a batch")
    p.add_argument("--epochs", type=int, default=10, help="stage-1 epochs")
    p.add_argument("--stage2-epochs", type=int, default=None, help="stage-2 epochs; unset means half of --epochs")
    p.add_argument("--rank", type=int, default=64, help="channel-attention rank (g2m)")
    p.add_argument("--clusters", type=int, default=64, help="NetVLAD clusters K")
    p.add_argument("--out-per-cluster", type=int, default=128, help="projected size per cluster (nvl)")
    p.add_argument("--with-cls", action="store_true", help="append the projected CLS token (nvl)")
    p.add_argument("--backbone-blocks", type=int, default=4, help="toy backbone blocks before the head")
    p.add_argument("--trainable-tail", type=int, default=4, help="trainable trailing backbone blocks")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint")
    p.add_argument("--log", type=Path, default=None, help="JSON-lines step log; unset means <out>.log.jsonl")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="describe feature maps into a database", formatter_class=fmt)
    p.add_argument("--ckpt", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--features-dir", type=Path, required=True, help="directory of <image_id>.spfm files")
    p.add_argument("--records", type=Path, default=None, help="GeoRecords: selects images and adds east/north")
    p.add_argument("--meta", type=Path, default=None, help="JSON lines with extra fields (frame, match_id)")
    p.add_argument("--out", type=Path, required=True, help="output .spdb")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="recall@K of queries against a database", formatter_class=fmt)
    p.add_argument("--db", type=Path, required=True, help="database .spdb")
    p.add_argument("--queries", type=Path, required=True, help="query descriptors .spdb")
    p.add_argument("--regime", choices=["geo", "frame", "exact"], default="geo", help="ground-truth rule")
    p.add_argument("--threshold", type=float, default=25.0, help="meters (geo) or frames (frame)")
    p.add_argument("--ks", type=_parse_ks, default="1,5,10", help="comma-separated K values")
    p.add_argument("--shards", type=int, default=1, help="database shards searched independently")
    p.add_argument("--format", choices=["table", "json"], default="table", help="report format")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pca", help="fit a PCA reduction on a database", formatter_class=fmt)
    p.add_argument("--db", type=Path, required=True, help="database .spdb to fit on")
    p.add_argument("--dim", type=int, default=8192, help="output dimension")
    p.add_argument("--out", type=Path, required=True, help="output model (.npz)")
    p.add_argument("--project", nargs=2, action="append", metavar=("IN", "OUT"), type=Path,
                   help="also write the projection of database IN to OUT; repeatable")
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass", formatter_class=fmt)
    p.add_argument("--head", choices=("all",) + CHECKS, default="all", help="which check to run")
    p.add_argument("--seeds", type=int, default=10, help="random draws per check")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("placerec: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_PARSE
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    print("config: " + json.dumps(resolved, sort_keys=True, default=str))
    try:
        return args.func(args)
    except CliError as exc:
        print(f"placerec: error: {exc}", file=sys.stderr)
        return exc.code
    except RecordError as exc:
        print(f"placerec: error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except FormatError as exc:
        print(f"placerec: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"placerec: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"placerec: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"placerec: error: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT


if __name__ == "__main__":
    sys.exit(main())
