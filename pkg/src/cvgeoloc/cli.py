"""Command-line entry point: ``cvgeoloc <command> [flags]``.

Every flag can also be set in a plain ``key = value`` file passed with
``--config``; keys are flag names without the leading dashes (``-`` and
``_`` are interchangeable). Flags given on the command line win.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .dataset import load_manifest, write_manifest
from .geodesy import GeoPoint, RegionLayout, cells_in_box, shape_report, write_cells_csv
from .gradcheck import finite_difference_check
from .hnsw import build_graph_index, knn_graph
from .model import CheckpointFormatError, ModelConfig, load_checkpoint
from .raster import read_raster, read_key_values, write_raster
from .retrieval import (
    DatabaseFormatError, EmbeddingDatabase, build_database, grouped_recall, hits_within,
    knn_exact, score_grid, write_results_csv, write_score_grid,
)
from .selftest import run_selftest
from .synthetic import SyntheticWorld, square_region, synth_photos, world_from_dict, world_to_dict
from .training import LodConfig, PairRenderer, TrainConfig, train

logger = logging.getLogger("cvgeoloc")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _HelpFormatter(argparse.HelpFormatter):
    """Shows the default of every flag, including flags without help text."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default is not argparse.SUPPRESS and action.option_strings and "%(default)" not in text:
            text += (" " if text else "") + "(default: %(default)s)"
        return text


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _available_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _bbox(text: str) -> tuple[GeoPoint, GeoPoint]:
    """``lat_min,lon_min,lat_max,lon_max`` in degrees."""
    try:
        a, b, c, d = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lat_min,lon_min,lat_max,lon_max, got {text!r}")
    if not (a < c and b < d):
        raise argparse.ArgumentTypeError("bounding box minimum must be below its maximum")
    return GeoPoint.from_degrees(a, b), GeoPoint.from_degrees(c, d)


def _latlon(text: str) -> GeoPoint:
    try:
        lat, lon = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lat,lon, got {text!r}")
    return GeoPoint.from_degrees(lat, lon)


def _lod(text: str) -> LodConfig:
    try:
        return LodConfig.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", help="key = value file with flag defaults")
    g.add_argument("--out", default=".", help="output directory")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.add_argument("--threads", type=int, default=_available_cores(), help="worker threads")
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity")


def _model_flags(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    g = p.add_argument_group("model")
    g.add_argument("--image-size", type=int, default=d.image_size, help="aerial image pixels")
    g.add_argument("--street-image-size", type=int, default=0, help="street image pixels (0: image size)")
    g.add_argument("--patch-size", type=int, default=d.patch_size, help="square patch side in pixels")
    g.add_argument("--token-dim", type=int, default=d.token_dim, help="token width")
    g.add_argument("--embed-dim", type=int, default=d.embed_dim, help="embedding width")
    g.add_argument("--heads", type=int, default=d.heads, help="attention heads in the pooling layer")
    g.add_argument("--lod-embedding", type=_bool, default=d.lod_embedding, help="per-LOD additive embedding")


def _lod_flag(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--lod", type=_lod, default=default,
                   help="levels of detail as n,d0,pixels (d0 in meters)")


def _source_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("imagery")
    g.add_argument("--world", help="world.json written by 'synth'")
    g.add_argument("--raster", help="raster file (.rgb with .meta sidecar)")
    g.add_argument("--image-root", help="directory for relative image paths in manifests")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="cvgeoloc", description="Cross-view geolocalization toolkit.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    t = TrainConfig()

    p = sub.add_parser("layout", help="cells of a region and layout shape diagnostics", formatter_class=fmt)
    _common(p)
    p.add_argument("--bbox", type=_bbox, required=True, help="lat_min,lon_min,lat_max,lon_max (degrees)")
    p.add_argument("--cell-size", type=float, default=t.cell_size, help="cell side l in meters")
    p.add_argument("--earth-radius", type=float, default=RegionLayout().earth_radius, help="sphere radius r in meters")

    p = sub.add_parser("synth", help="synthetic world raster and photo manifests", formatter_class=fmt)
    _common(p)
    w = SyntheticWorld(0, GeoPoint(0, 0), GeoPoint(0, 0))
    p.add_argument("--center", type=_latlon, default="47.0,8.0",
                   help="lat,lon of the region center (degrees)")
    p.add_argument("--side-m", type=float, default=3000.0, help="side of the photo region")
    p.add_argument("--margin-m", type=float, default=320.0, help="extra raster around the photo region")
    p.add_argument("--resolution", type=float, default=w.resolution, help="meters per pixel")
    p.add_argument("--octaves", type=int, default=w.octaves, help="noise octaves of the texture")
    p.add_argument("--wavelength-m", type=float, default=w.base_wavelength_m, help="wavelength of the coarsest octave")
    p.add_argument("--noise-sigma", type=float, default=w.photometric_noise_sigma, help="street photo pixel noise")
    p.add_argument("--street-crop-m", type=float, default=w.street_crop_m,
                   help="ground width seen by a street photo")
    p.add_argument("--n-train", type=int, default=2000, help="training photos")
    p.add_argument("--n-test", type=int, default=500, help="held-out query photos")

    p = sub.add_parser("train", help="train the two-encoder model", formatter_class=fmt)
    _common(p)
    _source_flags(p)
    p.add_argument("--manifest", required=True, help="training photo manifest (JSON lines)")
    _model_flags(p)
    _lod_flag(p, str(LodConfig()))
    g = p.add_argument_group("training")
    g.add_argument("--batch", type=int, default=t.batch_b, help="batch size b")
    g.add_argument("--iterations", type=int, default=t.iterations, help="optimizer steps")
    g.add_argument("--lr", type=float, default=t.lr_peak, help="peak learning rate")
    g.add_argument("--warmup", type=int, default=t.warmup_iters, help="warmup iterations")
    g.add_argument("--tau", type=float, default=t.temperature_tau, help="temperature, 1/36")
    g.add_argument("--eps", type=float, default=t.label_smoothing_eps, help="label smoothing")
    g.add_argument("--cell-size", type=float, default=t.cell_size, help="cell side l in meters")
    g.add_argument("--l-delta", type=float, default=t.l_delta, help="augmentation containment margin")
    g.add_argument("--mask-radius", type=float, default=t.mask_radius_m, help="false-negative radius")
    g.add_argument("--mask-boundary", type=_bool, default=t.mask_boundary,
                   help="measure the mask radius to the cell boundary")
    g.add_argument("--mining", type=_bool, default=t.mining, help="hard example mining on/off")
    g.add_argument("--s-max", type=int, default=t.s_max, help="mining pool size cap")
    g.add_argument("--checkpoint-every", type=int, default=t.checkpoint_every, help="iterations between checkpoints")

    p = sub.add_parser("build-db", help="embed every cell of a region", formatter_class=fmt)
    _common(p)
    _source_flags(p)
    p.add_argument("--model", required=True, help="checkpoint (.gcm)")
    p.add_argument("--bbox", type=_bbox, help="region (default: the synthetic world's photo region)")
    p.add_argument("--cell-size", type=float, default=t.cell_size, help="cell side l in meters")
    p.add_argument("--lod-d0", type=float, default=LodConfig().d0,
                   help="finest LOD sidelength in meters; n and pixels come from the model")

    p = sub.add_parser("embed-queries", help="embed the photos of a manifest", formatter_class=fmt)
    _common(p)
    _source_flags(p)
    p.add_argument("--model", required=True, help="checkpoint (.gcm)")
    p.add_argument("--manifest", required=True, help="photo manifest (JSON lines)")

    p = sub.add_parser("search", help="top-N cells for embedded queries", formatter_class=fmt)
    _common(p)
    p.add_argument("--db", required=True, help="database (.gcdb)")
    p.add_argument("--queries", required=True, help="embeddings (.npz) from embed-queries")
    p.add_argument("--manifest", help="query manifest; adds distances and hits to the output")
    p.add_argument("--n", type=int, default=10, help="results per query")
    p.add_argument("--index", choices=["exact", "graph"], default="exact", help="exhaustive scan or HNSW graph")
    p.add_argument("--m", type=int, default=16, help="graph degree")
    p.add_argument("--ef-construction", type=int, default=200, help="graph build beam width")
    p.add_argument("--ef-search", type=int, default=64, help="graph search beam width")
    p.add_argument("--radius", type=float, default=50.0, help="hit radius in meters")

    p = sub.add_parser("eval", help="recall, grouped recall and score grids", formatter_class=fmt)
    _common(p)
    p.add_argument("--db", required=True, help="database (.gcdb)")
    p.add_argument("--queries", required=True, help="embeddings (.npz) from embed-queries")
    p.add_argument("--manifest", required=True, help="photo manifest (JSON lines)")
    p.add_argument("--n", type=_int_list, default=[1, 10, 100], help="comma-separated N values")
    p.add_argument("--radius", type=float, default=50.0, help="hit radius in meters")
    p.add_argument("--group-by", choices=["none", "year", "hour"], default="none", help="grouped recall key")
    p.add_argument("--min-count", type=int, default=10, help="flag groups smaller than this")
    p.add_argument("--score-grid", default="", help="comma-separated query ids to dump score grids for")

    p = sub.add_parser("gradcheck", help="finite-difference check of model and loss", formatter_class=fmt)
    _common(p)
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")

    p = sub.add_parser("selftest", help="built-in property checks", formatter_class=fmt)
    _common(p)
    return parser


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    return read_key_values(path)


def _config_path(argv: list[str]) -> str | None:
    for k, a in enumerate(argv):
        if a == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if path is None or command not in COMMANDS:
        return parser.parse_args(argv)
    sub = _subparser(parser, command)
    dests = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in read_config(path).items():
        dest = key.strip().lstrip("-").replace("-", "_")
        if dest not in dests:
            raise UsageError(f"{path}: unknown setting {key!r} for '{command}'")
        action = dests[dest]
        try:
            defaults[dest] = action.type(value) if action.type else value
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"{path}: bad value for {key}: {e}") from None
        if action.choices is not None and defaults[dest] not in action.choices:
            raise UsageError(f"{path}: {key} must be one of {sorted(action.choices)}")
        # a required flag supplied by the file is no longer required
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _out(args, *parts) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, *parts)


def _load_world(path) -> SyntheticWorld:
    with open(path, encoding="utf-8") as f:
        return world_from_dict(json.load(f))


def _imagery(args):
    """(raster, world or None) from --world or --raster."""
    if args.world:
        world = _load_world(args.world)
        return world.aerial, world
    if args.raster:
        return read_raster(args.raster), None
    raise UsageError("one of --world or --raster is required")


def _model_config(args, lod: LodConfig) -> ModelConfig:
    if lod.pixels != args.image_size:
        raise UsageError(f"--lod pixels ({lod.pixels}) must equal --image-size ({args.image_size})")
    return ModelConfig(image_size=args.image_size, patch_size=args.patch_size, token_dim=args.token_dim,
                       heads=args.heads, embed_dim=args.embed_dim, n_lods=lod.n,
                       lod_embedding=args.lod_embedding, street_image_size=args.street_image_size)


def _read_queries(path):
    with np.load(path, allow_pickle=False) as z:
        return [str(x) for x in z["ids"]], np.asarray(z["embeddings"], dtype=np.float64)


def _aligned_photos(manifest_path, ids):
    by_id = {p.id: p for p in load_manifest(manifest_path)}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise UsageError(f"{len(missing)} query id(s) not in the manifest, e.g. {missing[0]!r}")
    return [by_id[i] for i in ids]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_layout(args) -> int:
    layout = RegionLayout(args.cell_size, args.earth_radius)
    cells = cells_in_box(layout, *args.bbox)
    write_cells_csv(_out(args, "cells.csv"), cells, layout)
    rep = shape_report(layout)
    lines = [f"cells {len(cells)}", f"cell_size_m {layout.cell_size!r}", f"max_band {layout.max_band}",
             f"worst_band {rep.worst_band}", f"min_trapezoid_ratio {rep.min_ratio!r}",
             f"max_side_deviation_m {rep.side_deviation(layout)!r}"]
    with open(_out(args, "layout_report.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_synth(args) -> int:
    world = SyntheticWorld.square(args.seed, args.center, args.side_m + 2 * args.margin_m,
                                  resolution=args.resolution, octaves=args.octaves,
                                  base_wavelength_m=args.wavelength_m,
                                  photometric_noise_sigma=args.noise_sigma,
                                  street_crop_m=args.street_crop_m)
    write_raster(_out(args, "world.rgb"), world.aerial)
    with open(_out(args, "world.json"), "w") as f:
        json.dump(world_to_dict(world), f, indent=2, sort_keys=True)
        f.write("\n")
    box = square_region(args.center, args.side_m)
    rng = np.random.default_rng([args.seed, 7])
    train_photos = synth_photos(world, args.n_train, rng, box=box)
    test_photos = synth_photos(world, args.n_test, rng, box=box, prefix="q")
    write_manifest(_out(args, "train.jsonl"), train_photos)
    write_manifest(_out(args, "test.jsonl"), test_photos)
    sw, ne = box
    with open(_out(args, "region.txt"), "w") as f:
        f.write(f"{sw.lat_deg!r},{sw.lon_deg!r},{ne.lat_deg!r},{ne.lon_deg!r}\n")
    print(f"world {world.aerial.width}x{world.aerial.height} px, "
          f"{len(train_photos)} train / {len(test_photos)} test photos")
    return EXIT_OK


def cmd_train(args) -> int:
    raster, world = _imagery(args)
    model_config = _model_config(args, args.lod)
    cfg = TrainConfig(batch_b=args.batch, iterations=args.iterations, lr_peak=args.lr,
                      warmup_iters=args.warmup, temperature_tau=args.tau, label_smoothing_eps=args.eps,
                      seed=args.seed, cell_size=args.cell_size, l_delta=args.l_delta,
                      mask_radius_m=args.mask_radius, mask_boundary=args.mask_boundary,
                      mining=args.mining, s_max=args.s_max, checkpoint_every=args.checkpoint_every,
                      threads=args.threads)
    photos = load_manifest(args.manifest).records
    renderer = PairRenderer(raster, model_config, args.lod, world=world, threads=args.threads,
                            image_root=args.image_root)
    result = train(renderer, photos, cfg, out_dir=args.out)
    last = result.metrics[-1]
    print(f"trained {cfg.iterations} iterations; final loss {last['loss']:.4f}, "
          f"in-batch recall@1 {last['batch_recall_at1']:.3f}")
    return EXIT_OK


def _world_region(args):
    if args.bbox:
        return args.bbox
    if args.world:
        region = os.path.join(os.path.dirname(os.path.abspath(args.world)), "region.txt")
        if os.path.exists(region):
            with open(region) as f:
                return _bbox(f.read().strip())
        world = _load_world(args.world)
        return world.region_min, world.region_max
    raise UsageError("--bbox is required without --world")


def cmd_build_db(args) -> int:
    raster, _ = _imagery(args)
    params = load_checkpoint(args.model)
    cfg = params.config
    layout = RegionLayout(args.cell_size, raster.earth_radius)
    db = build_database(params, layout, raster, _world_region(args), cfg.n_lods, args.lod_d0,
                        cfg.image_size, threads=args.threads)
    db.write(_out(args, "cells.gcdb"))
    counts = np.bincount(db.coverage, minlength=3)
    print(f"{len(db)} cells (coverage none/partial/full: {counts[0]}/{counts[1]}/{counts[2]})")
    return EXIT_OK


def cmd_embed_queries(args) -> int:
    from .experiment import embed_photos
    params = load_checkpoint(args.model)
    photos = load_manifest(args.manifest).records
    needs_world = any(p.pose is not None for p in photos)
    world = _load_world(args.world) if args.world else None
    if needs_world and world is None:
        raise UsageError("synthetic photos need --world")
    raster = world.aerial if world is not None else None
    lod = LodConfig(params.config.n_lods, LodConfig().d0, params.config.image_size)
    renderer = PairRenderer(raster, params.config, lod, world=world, image_root=args.image_root)
    emb = embed_photos(renderer, params, photos)
    np.savez(_out(args, "queries.npz"), ids=np.array([p.id for p in photos]), embeddings=emb)
    print(f"embedded {len(photos)} photos")
    return EXIT_OK


def cmd_search(args) -> int:
    db = EmbeddingDatabase.read(args.db)
    ids, emb = _read_queries(args.queries)
    if args.index == "graph":
        index = build_graph_index(db, args.m, args.ef_construction, args.ef_search, args.seed)
        results = [knn_graph(index, q, args.n) for q in emb]
    else:
        results = [knn_exact(db, q, args.n) for q in emb]
    path = _out(args, "results.csv")
    if args.manifest:
        write_results_csv(path, db, _aligned_photos(args.manifest, ids), results, args.radius)
    else:
        import csv
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["query_id", "rank", "band_i", "step_j", "score"])
            for qid, res in zip(ids, results):
                for rank, (cell, score) in enumerate(zip(res.cells, res.scores), 1):
                    w.writerow([qid, rank, cell.band, cell.step, repr(float(score))])
    print(f"{len(results)} queries, top {args.n} each -> {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    db = EmbeddingDatabase.read(args.db)
    ids, emb = _read_queries(args.queries)
    photos = _aligned_photos(args.manifest, ids)
    if not args.n or min(args.n) < 1:
        raise UsageError("--n needs positive values")
    top = max(args.n)
    results = [knn_exact(db, q, top) for q in emb]
    hits = np.array([hits_within(db, r, p.location, args.radius) for r, p in zip(results, photos)])
    lines = ["n,recall"]
    for n in args.n:
        recall = float(hits[:, :n].any(axis=1).mean())
        lines.append(f"{n},{recall!r}")
        print(f"R@{n}<{args.radius:g}m {recall:.4f}")
    with open(_out(args, "recall.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    if args.group_by != "none":
        with open(_out(args, f"recall_by_{args.group_by}.csv"), "w") as f:
            f.write("group,n,count,recall,below_min_count\n")
            for n in args.n:
                for row in grouped_recall(results, photos, db, args.group_by, n, args.radius, args.min_count):
                    f.write(f"{row.key},{n},{row.count},{row.recall!r},{int(row.below_min_count)}\n")
    wanted = [x for x in args.score_grid.split(",") if x]
    for qid in wanted:
        if qid not in ids:
            raise UsageError(f"unknown query id {qid!r}")
        write_score_grid(_out(args, f"score_grid_{qid}.csv"), score_grid(db, emb[ids.index(qid)]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rep = finite_difference_check(args.seed)
    for name, err in rep.per_tensor.items():
        logger.debug("%s %.3e", name, err)
    print(f"seed {args.seed}: max relative error {rep.max_relative_error:.3e}")
    return EXIT_OK if rep.passed(args.tol) else EXIT_INVALID


def cmd_selftest(args) -> int:
    results = run_selftest(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<20} {r.detail}  ({r.seconds:.1f}s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


COMMANDS = {
    "layout": cmd_layout, "synth": cmd_synth, "train": cmd_train, "build-db": cmd_build_db,
    "embed-queries": cmd_embed_queries, "search": cmd_search, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "selftest": cmd_selftest,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except SystemExit as e:  # --help and --version
        return int(e.code or 0)
    except (OSError, DatabaseFormatError, CheckpointFormatError) as e:
        print(f"cvgeoloc: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, argparse.ArgumentTypeError) as e:
        print(f"cvgeoloc: error: {e}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())
