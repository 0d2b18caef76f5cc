"""Command-line pipeline: synth, fit-regressor, refine, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error. The default
thread count for row-parallel fits and batched refinement comes from the
JOINTREG_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .camera_render import project
from .dataio import (
    PRESETS,
    generate_synthetic,
    load_manifest,
    load_poses,
    load_regressor,
    read_pgm,
    save_poses,
    save_regressor,
    write_ppm,
)
from .errors import RefineError
from .metrics import evaluate_regressors, format_table
from .plausibility import save_discriminator
from .refine import RefineConfig, frames_from_manifest, refine_dataset
from .regressor import bootstrap_spin_regressor, realize_vertices

logger = logging.getLogger("jointreg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# overlay colours: ground truth, baseline regressor, our regressor
GT_RGB, BASE_RGB, OURS_RGB = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)


class UsageError(Exception):
    """Bad flags or missing inputs; reported with exit code 2."""


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _checksums(paths: dict) -> dict:
    return {name: _sha256(p) for name, p in sorted(paths.items())}


def _write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("JOINTREG_THREADS", "1")))
    except ValueError:
        raise UsageError("JOINTREG_THREADS must be an integer") from None


def _report_path(out: Path) -> Path:
    return out.with_suffix(".report.json")


# --- synth -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    overrides = {k: getattr(args, k) for k in ("pose_noise", "joint_noise_mm", "mask_flip", "n_frames")
                 if getattr(args, k) is not None}
    scenario = dataclasses.replace(PRESETS[args.preset], seed=args.seed, **overrides)
    path = generate_synthetic(scenario, args.out)
    print(f"wrote {scenario.n_frames} frames to {path}")
    return EXIT_OK


# --- fit-regressor -----------------------------------------------------------------


def cmd_fit_regressor(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.source == "init":
        pose_path = Path(args.poses) if args.poses else manifest.resolve(manifest.poses)
    else:
        pose_path = Path(args.poses) if args.poses else manifest.root / "poses_refined.rgft"
        if not pose_path.is_file():
            raise UsageError(f"refined poses not found at {pose_path}; run 'refine' first or pass --poses")
    if not pose_path.is_file():
        raise UsageError(f"pose file not found: {pose_path}")
    poses = load_poses(pose_path)
    joints = manifest.load_joints()
    model = manifest.load_model()
    entries = manifest.frames_in(args.split)
    missing = [e.pose_key for e in entries if e.pose_key not in poses]
    if missing:
        raise UsageError(f"pose file {pose_path} lacks {len(missing)} frame(s), e.g. {missing[0]}")
    frames = [(*poses[e.pose_key], joints[e.joints_key]) for e in entries]
    options = {"lambda_sum": args.lambda_sum, "solver": args.solver, "max_support": args.max_support,
               "support_radius": args.support_radius}
    reg = bootstrap_spin_regressor(model, frames, n_jobs=_threads(), **options)
    report = {
        "command": "fit-regressor",
        "version": __version__,
        "source": args.source,
        "split": args.split,
        "frames": len(frames),
        "config": options,
        "seed": args.seed,
        "inputs": _checksums({"manifest": manifest.path, "poses": pose_path,
                              "model": manifest.resolve(manifest.model), "joints": manifest.resolve(manifest.joints)}),
        "converged": reg.converged,
        "warnings": list(reg.warnings),
        "residual_rmse_m": reg.diagnostics["rmse"],
        "per_joint_rmse_m": reg.diagnostics["per_joint_rmse"],
        "row_sums": reg.diagnostics["row_sums"],
        "row_sum_max_deviation": float(np.max(np.abs(reg.weights.sum(axis=1) - 1.0))),
        "min_weight": float(reg.weights.min()),
        "nonzeros": reg.diagnostics["nonzeros"],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_regressor(out, reg, {"source": args.source, "split": args.split})
    _write_json(_report_path(out), report)
    print(f"regressor {out}: rmse {report['residual_rmse_m'] * 1000:.3f} mm, "
          f"row sums within {report['row_sum_max_deviation']:.2e} of 1, converged={reg.converged}")
    return EXIT_OK


# --- refine ------------------------------------------------------------------------


def cmd_refine(args) -> int:
    manifest = load_manifest(args.manifest)
    reg_path = Path(args.regressor)
    if not reg_path.is_file():
        raise UsageError(f"regressor not found: {reg_path}")
    regressor = load_regressor(reg_path)
    model = manifest.load_model()
    config = RefineConfig(
        iterations=args.iterations, lr=args.lr, sigma=args.sigma if args.sigma else manifest.sigma,
        use_joint=not args.no_joint, use_silhouette=not args.no_silhouette, use_adv=not args.no_adv,
        seed=args.seed, mode=args.mode, n_jobs=_threads(), disc_include_shape=not args.pose_only_disc,
        replay_size=args.replay_size,
    )
    frames = frames_from_manifest(manifest, args.split)
    reg_bytes = reg_path.read_bytes()
    result = refine_dataset(frames, model, regressor, config)
    if reg_path.read_bytes() != reg_bytes:
        raise RuntimeError("the frozen regressor file changed during refinement")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_poses(out, result.poses, {"source": "refined", "seed": args.seed})
    report = dict(result.report)
    # the thread count never changes results, so it stays out of the report
    report["config"] = {k: v for k, v in report["config"].items() if k != "n_jobs"}
    report.update({
        "command": "refine",
        "version": __version__,
        "split": args.split,
        "inputs": _checksums({"manifest": manifest.path, "regressor": reg_path,
                              "poses": manifest.resolve(manifest.poses), "model": manifest.resolve(manifest.model)}),
        "energy_decreased": (report["mean_final_energy"] is not None
                             and report["mean_final_energy"] < report["mean_initial_energy"]),
    })
    _write_json(_report_path(out), report)
    if result.discriminator is not None:
        save_discriminator(out.with_suffix(".disc.rgft"), result.discriminator, result.disc_state)
    print(f"refined {len(frames)} frames ({len(report['failures'])} failed): mean energy "
          f"{report['mean_initial_energy']} -> {report['mean_final_energy']}")
    return EXIT_OK


# --- evaluate ----------------------------------------------------------------------


def _parse_named(items):
    named = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--regressor expects name=path, got {item!r}")
        if name in named:
            raise UsageError(f"regressor name {name!r} given twice")
        named[name] = Path(path)
    return named


def _draw_points(img, uv, rgb, radius=1):
    h, w, _ = img.shape
    for u, v in np.rint(uv).astype(int):
        y0, y1 = max(v - radius, 0), min(v + radius + 1, h)
        x0, x1 = max(u - radius, 0), min(u + radius + 1, w)
        if y0 < y1 and x0 < x1:
            img[y0:y1, x0:x1] = rgb


def _overlay(mask, camera, gt, base, ours):
    img = np.repeat(0.5 * mask[:, :, None], 3, axis=2)
    for joints, rgb in ((gt, GT_RGB), (base, BASE_RGB), (ours, OURS_RGB)):
        uv, _, behind = project(camera, joints)
        _draw_points(img, uv[~behind], rgb)
    return np.rint(255 * img).astype(np.uint8)


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    named = _parse_named(args.regressor) if args.regressor else {}
    if args.include_manifest_regressors:
        for name, rel in manifest.regressors.items():
            named.setdefault(name, manifest.resolve(rel))
    if not named:
        raise UsageError("no regressors given (use --regressor name=path)")
    for name, path in named.items():
        if not path.is_file():
            raise UsageError(f"regressor {name!r} not found: {path}")
    regs = {name: load_regressor(path) for name, path in named.items()}
    pose_path = Path(args.poses) if args.poses else manifest.resolve(manifest.poses)
    if not pose_path.is_file():
        raise UsageError(f"pose file not found: {pose_path}")
    poses = load_poses(pose_path)
    joints = manifest.load_joints()
    model = manifest.load_model()
    entries = manifest.frames_in(args.split)
    frames = [(poses[e.pose_key], joints[e.joints_key]) for e in entries]
    rows = evaluate_regressors(frames, regs, model, root=args.root)
    tsv, text = format_table(rows, method=args.method)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.tsv").write_text(tsv)
    (out / "table.txt").write_text(text)
    inputs = {"manifest": manifest.path, "poses": pose_path}
    inputs.update({f"regressor:{n}": p for n, p in named.items()})
    _write_json(out / "report.json", {
        "command": "evaluate",
        "version": __version__,
        "split": args.split,
        "frames": len(frames),
        "root_joint": args.root,
        "units": "mm",
        "seed": args.seed,
        "results": rows,
        "inputs": _checksums(inputs),
    })
    if args.overlays:
        names = list(regs)
        base = args.baseline or names[0]
        ours = args.ours or names[-1]
        for key in (base, ours):
            if key not in regs:
                raise UsageError(f"overlay regressor {key!r} is not among {names}")
        (out / "overlays").mkdir(exist_ok=True)
        for entry, (src, gt) in list(zip(entries, frames))[: args.overlays]:
            params, trans = src
            verts = realize_vertices(model, params, trans)
            camera = entry.crop_camera
            img = _overlay(read_pgm(manifest.resolve(entry.mask)), camera, gt,
                           regs[base].weights @ verts, regs[ours].weights @ verts)
            write_ppm(out / "overlays" / f"{entry.id}.ppm", img)
    print(text, end="")
    return EXIT_OK


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="mini")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--pose-noise", type=float)
    p.add_argument("--joint-noise-mm", type=float)
    p.add_argument("--mask-flip", type=float)
    p.add_argument("--n-frames", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-regressor", help="fit a vertex-to-joint regressor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--source", choices=("init", "refined"), default="init")
    p.add_argument("--poses", help="pose set (default: manifest poses for init, poses_refined.rgft for refined)")
    p.add_argument("--split", default="train")
    p.add_argument("--lambda-sum", type=float, default=1e3)
    p.add_argument("--solver", choices=("pg", "active_set"), default="pg")
    p.add_argument("--max-support", type=int)
    p.add_argument("--support-radius", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_regressor)

    p = sub.add_parser("refine", help="refine pose estimates with a frozen regressor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--regressor", required=True)
    p.add_argument("--out", required=True, help="output pose set; the report goes next to it")
    p.add_argument("--split", default="all")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--sigma", type=float, help="soft-raster width in pixels (default: manifest)")
    p.add_argument("--no-joint", action="store_true")
    p.add_argument("--no-silhouette", action="store_true")
    p.add_argument("--no-adv", action="store_true")
    p.add_argument("--pose-only-disc", action="store_true", help="discriminator ignores shape")
    p.add_argument("--replay-size", type=int, default=1024)
    p.add_argument("--mode", choices=("sequential", "batched"), default="sequential")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="compare regressors by MPJPE and PA-MPJPE")
    p.add_argument("--manifest", required=True)
    p.add_argument("--regressor", action="append", metavar="NAME=PATH")
    p.add_argument("--include-manifest-regressors", action="store_true")
    p.add_argument("--poses", help="pose set to evaluate (default: manifest poses)")
    p.add_argument("--split", default="test")
    p.add_argument("--root", type=int, default=0, help="root joint for root-aligned MPJPE")
    p.add_argument("--method", default="estimate", help="row label in the table")
    p.add_argument("--overlays", type=int, default=0, help="write overlays for the first N frames")
    p.add_argument("--baseline", help="regressor drawn in green (default: first)")
    p.add_argument("--ours", help="regressor drawn in blue (default: last)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, FileNotFoundError) as exc:
        # manifest, container, dimension and data errors are all validation failures
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RefineError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
