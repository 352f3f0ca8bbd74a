"""Command-line driver: dataset preparation, embedding training, completion,
evaluation, and export.

Exit codes: 0 success, 2 input error, 3 numeric failure, 4 pipeline
precondition failure. Every run echoes its fully resolved config as JSON
beside the outputs so reruns from that file reproduce the results exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from .blend import OptimizationError
from .config import PipelineConfig, preset_config
from .evaluation import (CropGenerationError, crop_cuboid, crop_plane, iou,
                         run_benchmark)
from .figures import render_report_figures
from .pipeline import (PipelineError, complete_shape, coarse_only_completion,
                       make_coarse)
from .retrieval import (EmptyCodebookError, TrainingDivergedError,
                        init_embedder, load_retrieval_db, make_triplets,
                        save_retrieval_db, train_embedding, build_codebook)
from .voxelgrid import GridFormatError, export_obj, read_grid, write_grid

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_PRECONDITION = 4

_ABLATIONS = {"no-deform": "no_deform", "no-blend": "no_blend",
              "no-smooth": "no_smooth"}

# flag destination -> config field, applied only when given on the command line
_OVERRIDES = {
    "seed": "seed", "threads": "threads", "K": "K", "M": "M",
    "alpha": "alpha", "retrieval": "retrieval_mode",
    "coarse": "coarse_provider", "coarse_path": "coarse_path",
    "shortlist": "shortlist", "epochs": "epochs", "code_dim": "code_dim",
}


class InputError(ValueError):
    """Bad paths, unreadable files, or an empty dataset."""


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=("default", "small"),
                   help="named parameter preset used when no --config is given")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int,
                   help="subvolume parallelism; PATCHRD_THREADS is the "
                        "environment fallback")
    p.add_argument("--K", type=int, help="retrieved candidates per location")
    p.add_argument("--M", type=int, help="blended candidates per subvolume")
    p.add_argument("--alpha", type=float, help="smoothness loss weight")
    p.add_argument("--retrieval", choices=("exact", "embedding"))
    p.add_argument("--coarse", choices=("gt_downsample", "heuristic",
                                        "external_file"))
    p.add_argument("--coarse-path", dest="coarse_path",
                   help="coarse grid file for --coarse external_file")
    p.add_argument("--shortlist", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--code-dim", dest="code_dim", type=int)
    p.add_argument("--ablate", action="append", choices=sorted(_ABLATIONS),
                   default=None, help="disable a pipeline stage (repeatable)")


def resolve_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        cfg = PipelineConfig.load(args.config)
    else:
        cfg = preset_config(getattr(args, "preset", None) or "default")
    overrides = {}
    for flag, field in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[field] = v
    if "threads" not in overrides and os.environ.get("PATCHRD_THREADS"):
        overrides["threads"] = int(os.environ["PATCHRD_THREADS"])
    for name in getattr(args, "ablate", None) or []:
        overrides[_ABLATIONS[name]] = True
    return cfg.replace(**overrides) if overrides else cfg


def _echo_config(cfg: PipelineConfig, out_dir, name: str) -> str:
    path = os.path.join(out_dir, f"{name}_config.json")
    cfg.save(path)
    return path


def _read_input_grid(path):
    if not os.path.exists(path):
        raise InputError(f"input file does not exist: {path}")
    return read_grid(path)


def _stem(path) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def cmd_crop(args) -> int:
    cfg = resolve_config(args)
    grid = _read_input_grid(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    seed = cfg.seed if args.seed is None else args.seed
    if args.kind == "cuboid":
        lo, hi = (float(v) for v in args.ratio.split(":"))
        partial, spec = crop_cuboid(grid, (lo, hi), seed)
    else:
        partial, spec = crop_plane(grid, seed)
    stem = _stem(args.input)
    out_grid = os.path.join(args.out_dir, f"{stem}_partial.pvox")
    write_grid(partial, out_grid)
    sidecar = os.path.join(args.out_dir, f"{stem}_crop.json")
    with open(sidecar, "w") as fh:
        json.dump({"kind": spec.kind, "ratio_range": list(spec.ratio_range),
                   "seed": spec.seed, "realized": spec.realized},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(cfg, args.out_dir, f"{stem}_crop")
    print(f"wrote {out_grid} (deleted fraction "
          f"{spec.realized['deleted_fraction']:.3f})")
    return EXIT_OK


def cmd_train_embed(args) -> int:
    cfg = resolve_config(args)
    S = _read_input_grid(args.partial)
    S_gt = _read_input_grid(args.gt)
    C = make_coarse(S, cfg.replace(coarse_provider="gt_downsample"), S_gt)
    codebook = build_codebook(S, cfg.s_patch, cfg.gamma_patch)
    if cfg.epochs == 0:
        warnings.warn("--epochs 0: writing an initialized, untrained embedder")
        rng = np.random.default_rng(cfg.seed)
        ec = init_embedder("coarse", cfg.s_patch, cfg.code_dim, rng)
        ed = init_embedder("detailed", cfg.s_patch, cfg.code_dim, rng)
        history = []
    else:
        triplets = make_triplets(
            S, C, S_gt, cfg.n_rnd, cfg.n_true, cfg.seed,
            extent=cfg.s_patch, stride=cfg.gamma_patch,
            distance_kwargs={"init_mode": cfg.icp_init_mode,
                             "max_refines": cfg.icp_max_refines})
        ec, ed, history = train_embedding(
            triplets, epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed,
            code_dim=cfg.code_dim, batch=cfg.batch, lr_decay=cfg.lr_decay)
    save_retrieval_db(args.output, ec, ed, codebook)
    out_dir = os.path.dirname(os.path.abspath(args.output))
    _echo_config(cfg, out_dir, f"{_stem(args.output)}_train")
    for epoch, loss in enumerate(history):
        print(f"epoch {epoch}: loss {loss:.6f}")
    print(f"wrote {args.output} ({len(codebook)} codebook patches)")
    return EXIT_OK


def cmd_complete(args) -> int:
    cfg = resolve_config(args)
    S = _read_input_grid(args.input)
    if S.occupied_count == 0:
        raise InputError(f"input shape is empty: {args.input}")
    S_gt = _read_input_grid(args.gt) if args.gt else S
    embedders = None
    if cfg.retrieval_mode == "embedding":
        if not args.db:
            raise InputError("embedding retrieval requires --db")
        ec, ed, _ = load_retrieval_db(args.db)
        embedders = (ec, ed)
    os.makedirs(args.out_dir, exist_ok=True)
    res = complete_shape(S, cfg, S_gt=S_gt, embedders=embedders)
    stem = _stem(args.input)
    scalar_path = os.path.join(args.out_dir, f"{stem}_scalar.pvox")
    binary_path = os.path.join(args.out_dir, f"{stem}_completed.pvox")
    obj_path = os.path.join(args.out_dir, f"{stem}_completed.obj")
    diag_path = os.path.join(args.out_dir, f"{stem}_diagnostics.json")
    write_grid(res.scalar, scalar_path)
    write_grid(res.binary, binary_path)
    export_obj(res.binary, 0.5, obj_path)
    with open(diag_path, "w") as fh:
        json.dump(res.diagnostics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(cfg, args.out_dir, f"{stem}_complete")
    print(f"wrote {binary_path} (IoU vs input "
          f"{iou(res.binary, S.binarize()):.3f})")
    return EXIT_OK


def _load_dataset(dataset_dir):
    if not os.path.isdir(dataset_dir):
        raise InputError(f"dataset directory does not exist: {dataset_dir}")
    names = sorted(n for n in os.listdir(dataset_dir)
                   if n.endswith((".pvox", ".txt")))
    if not names:
        raise InputError(f"no .pvox/.txt grids in {dataset_dir}")
    return [(os.path.splitext(n)[0], read_grid(os.path.join(dataset_dir, n)))
            for n in names]


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    shapes = _load_dataset(args.dataset_dir)
    os.makedirs(args.out_dir, exist_ok=True)
    ratios = [float(v) / 100.0 for v in args.ratios.split(",")]
    seeds = [int(v) for v in args.seeds.split(",")]

    def complete_fn(partial, gt):
        return complete_shape(partial, cfg, S_gt=gt).binary

    def coarse_fn(partial, gt):
        return coarse_only_completion(partial, cfg, S_gt=gt)

    report = run_benchmark(shapes, complete_fn, coarse_fn, ratios, seeds,
                           include_baseline=args.coarse_only)
    csv_path = os.path.join(args.out_dir, "report.csv")
    report.to_csv(csv_path, include_runtime=args.include_runtime)
    figures = render_report_figures(report, args.out_dir, prefix="report")
    _echo_config(cfg, args.out_dir, "eval")
    agg = report.aggregates()
    keys = sorted(agg)
    header = "ratio    " + "".join(f"{k[1]*100:>9.0f}%" for k in keys)
    print(header)
    for row_name, field in (("cd_mean", "cd_mean"), ("cd_median", "cd_median"),
                            ("iou_mean", "iou_mean")):
        print(f"{row_name:<9}" + "".join(f"{agg[k][field]:>10.3f}"
                                         for k in keys))
    print(f"wrote {csv_path} and {len(figures)} figures")
    return EXIT_OK


def cmd_export_obj(args) -> int:
    grid = _read_input_grid(args.input)
    export_obj(grid.binarize(args.threshold), args.threshold, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_info(args) -> int:
    if not os.path.exists(args.path):
        raise InputError(f"input file does not exist: {args.path}")
    with open(args.path, "rb") as fh:
        magic = fh.read(8)
    if magic == b"PRDB1\x00\x00\x00":
        ec, ed, codebook = load_retrieval_db(args.path)
        print(f"{args.path}: retrieval db, patch extent "
              f"{round(ec.in_dim ** (1 / 3))}, code_dim {ec.code_dim}, "
              f"{len(codebook)} codebook patches")
        return EXIT_OK
    grid = read_grid(args.path)
    kind = "binary" if grid.is_binary else "scalar"
    print(f"{args.path}: {kind} grid {grid.size}^3, "
          f"{grid.occupied_count} occupied voxels")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxpatch",
        description="Voxel shape completion by patch retrieval, deformation "
                    "and blending.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("crop", help="delete a region from a shape")
    p.add_argument("input")
    p.add_argument("out_dir")
    p.add_argument("--kind", choices=("cuboid", "plane"), default="cuboid")
    p.add_argument("--ratio", default="0.1:0.3",
                   help="lo:hi deleted occupied-volume fraction (cuboid)")
    _add_config_args(p)
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("train-embed", help="train the retrieval embedders")
    p.add_argument("partial")
    p.add_argument("gt")
    p.add_argument("output", help="output retrieval db (.prdb)")
    _add_config_args(p)
    p.set_defaults(func=cmd_train_embed)

    p = sub.add_parser("complete", help="complete a partial shape")
    p.add_argument("input")
    p.add_argument("out_dir")
    p.add_argument("--gt", help="ground-truth grid for gt_downsample coarse; "
                                "defaults to the input itself")
    p.add_argument("--db", help="retrieval db for --retrieval embedding")
    _add_config_args(p)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("eval", help="benchmark over a dataset directory")
    p.add_argument("dataset_dir")
    p.add_argument("out_dir")
    p.add_argument("--ratios", default="10,20,40",
                   help="comma-separated crop percentages")
    p.add_argument("--seeds", default="0")
    p.add_argument("--coarse-only", action="store_true",
                   help="include coarse-only baseline rows")
    p.add_argument("--include-runtime", action="store_true",
                   help="record wall-clock runtimes (breaks rerun "
                        "byte-identity)")
    _add_config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-obj", help="export a grid as a mesh")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_export_obj)

    p = sub.add_parser("info", help="describe a grid or retrieval db file")
    p.add_argument("path")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, GridFormatError,
            CropGenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDivergedError, OptimizationError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EmptyCodebookError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
