"""Command-line entry point: ``dirpose {gen,fit,pipeline,viz}``.

Parameter precedence is flags > ``--config`` JSON file > built-in defaults.
All randomness derives from ``--seed`` through named sub-streams
(:func:`substream`), so a command rerun with the same flags writes the same
files. Wall-clock timestamps only go to ``run.log``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import zlib
from pathlib import Path

import numpy as np

from dirpose import __version__
from dirpose.errors import DirPoseError, DivergedFit, UsageError

log = logging.getLogger("dirpose")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

DEFAULTS: dict[str, dict] = {
    "gen": {
        "pairs": 100,
        "fov": 90.0,
        "res": 256,
        "cone": 45.0,
        "baseline": 2.25,
        "pano_res": 1024,
        "max_rotation": None,
        "room": "3,3,1.5",
        "panos": True,
    },
    "fit": {
        "mode": "dir",
        "target": "0,0,1",
        "angle": 90.0,
        "axis": None,
        "steps": 2000,
        "kappa": 10.0,
        "lr": 0.1,
        "optimizer": "adam",
        "activation": "softplus",
        "grid": 64,
        "init_scale": 1e-3,
        "lambda_d": 8e7,
        "lambda_sigma": 0.1,
    },
    "pipeline": {
        "manifest": None,
        "predictor": "oracle",
        "perturb": None,
        "pairs_limit": None,
        "fit_steps": 2000,
        "kappa": 10.0,
        "grid": 64,
        "warp": True,
    },
    "viz": {
        "manifest": None,
        "pair": None,
        "points": 8,
        "results": None,
    },
}
GLOBAL_DEFAULTS = {"seed": 0, "out": "out", "threads": None}

# Default perturbation (degrees) per predictor when --perturb is not given.
PREDICTOR_PERTURB = {"oracle": 0.0, "perturbed": 15.0, "gridfit": 0.0}


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for a named purpose: seeded by (seed, crc32(name), *index)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *index])


def _vec3(text: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in str(text).split(",")])
    except ValueError as exc:
        raise UsageError(f"expected three comma-separated numbers, got {text!r}") from exc
    if v.shape != (3,):
        raise UsageError(f"expected three comma-separated numbers, got {text!r}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=S, help="master seed (default 0)")
    common.add_argument("--out", default=S, help="output directory (default ./out)")
    common.add_argument("--threads", type=_positive_int, default=S, help="worker threads (default: all cores)")
    common.add_argument("--config", default=S, help="JSON file of parameters; flags override it")
    common.add_argument("-v", "--verbose", action="store_true", default=S)

    parser = argparse.ArgumentParser(prog="dirpose", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dirpose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic pose-pair dataset")
    gen.add_argument("--pairs", type=_positive_int, default=S, help="number of pairs (default 100)")
    gen.add_argument("--fov", type=float, default=S, help="horizontal field of view in degrees (default 90)")
    gen.add_argument("--res", type=_positive_int, default=S, help="square image size in pixels (default 256)")
    gen.add_argument("--cone", type=float, default=S, help="look-at cone half-angle in degrees (default 45)")
    gen.add_argument("--baseline", type=float, default=S, help="panorama separation in meters (default 2.25)")
    gen.add_argument("--pano-res", type=_positive_int, default=S, help="panorama width; height is half (default 1024)")
    gen.add_argument("--max-rotation", type=float, default=S, help="reject pairs rotating more than this (degrees)")
    gen.add_argument("--room", default=S, help="room half extents x,y,z in meters (default 3,3,1.5)")
    gen.add_argument("--no-panos", dest="panos", action="store_false", default=S, help="skip writing panoramas")

    fit = sub.add_parser("fit", parents=[common], help="fit sphere grids to a direction or rotation")
    fit.add_argument("--mode", choices=["dir", "rot9d", "rot6d"], default=S)
    fit.add_argument("--target", default=S, help="target direction x,y,z for --mode dir")
    fit.add_argument("--angle", type=float, default=S, help="rotation angle in degrees for rot modes (default 90)")
    fit.add_argument("--axis", default=S, help="rotation axis x,y,z (default: random from seed)")
    fit.add_argument("--steps", type=int, default=S)
    fit.add_argument("--kappa", type=float, default=S)
    fit.add_argument("--lr", type=float, default=S)
    fit.add_argument("--optimizer", choices=["adam", "gd"], default=S)
    fit.add_argument("--activation", choices=["softplus", "exp"], default=S)
    fit.add_argument("--grid", type=_positive_int, default=S, help="grid height = width (default 64)")
    fit.add_argument("--init-scale", type=float, default=S)
    fit.add_argument("--lambda-d", type=float, default=S)
    fit.add_argument("--lambda-sigma", type=float, default=S)

    pipe = sub.add_parser("pipeline", parents=[common], help="run the two-stage rotate/derotate/translate pipeline")
    pipe.add_argument("--manifest", default=S, help="manifest.jsonl written by gen")
    pipe.add_argument("--predictor", default=S, help="comma list of oracle, perturbed, gridfit")
    pipe.add_argument("--perturb", type=float, default=S, help="rotation perturbation in degrees")
    pipe.add_argument("--pairs-limit", type=_positive_int, default=S)
    pipe.add_argument("--fit-steps", type=_positive_int, default=S)
    pipe.add_argument("--kappa", type=float, default=S)
    pipe.add_argument("--grid", type=_positive_int, default=S)
    pipe.add_argument("--no-warp", dest="warp", action="store_false", default=S, help="skip image derotation warps")

    viz = sub.add_parser("viz", parents=[common], help="draw epipolar-line overlays")
    viz.add_argument("--manifest", default=S)
    viz.add_argument("--pair", default=S, help="pair id (default: first in manifest)")
    viz.add_argument("--points", type=int, default=S)
    viz.add_argument("--results", default=S, help="per_pair.json from pipeline, adds estimated poses")
    return parser


def resolve_config(command: str, flags: dict) -> dict:
    """Merge defaults, an optional config file and explicit flags."""
    allowed = {**GLOBAL_DEFAULTS, **DEFAULTS[command]}
    cfg = dict(allowed)
    path = flags.pop("config", None)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.get(command, data).items()}
        unknown = sorted(set(data) - set(allowed))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(data)
    flags.pop("verbose", None)
    cfg.update(flags)
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    return cfg


RUN_LOG = "dirpose-run-log"
CONSOLE = "dirpose-console"


def _setup_console(verbose: bool) -> None:
    """Warnings (or info with -v) to stderr; run.log always gets info."""
    logger = logging.getLogger("dirpose")
    logger.setLevel(logging.INFO)
    logger.propagate = False
    for h in [h for h in logger.handlers if h.get_name() == CONSOLE]:
        logger.removeHandler(h)
    console = logging.StreamHandler(sys.stderr)
    console.set_name(CONSOLE)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    logger.addHandler(console)


def _close_run_log() -> None:
    logger = logging.getLogger("dirpose")
    for h in [h for h in logger.handlers if h.get_name() == RUN_LOG]:
        logger.removeHandler(h)
        h.close()


def _setup_output(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    _close_run_log()
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    handler.set_name(RUN_LOG)
    logging.getLogger("dirpose").addHandler(handler)
    meta = {
        "command": command,
        "dirpose": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg["seed"],
        "flags": {k: v for k, v in sorted(cfg.items()) if k != "threads"},
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, default=str) + "\n")
    log.info("%s: writing to %s", command, out)
    return out


# -- commands ----------------------------------------------------------------------------


def cmd_gen(cfg: dict) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from dirpose.camera import save_depth, save_png
    from dirpose.pano import SceneSpec, _check_baseline, generate_pair, write_manifest, write_pair

    if cfg["pairs"] < 1:
        raise UsageError("--pairs must be at least 1")
    scene = SceneSpec(half_extents=tuple(_vec3(cfg["room"])), seed=cfg["seed"])
    _check_baseline(scene, cfg["baseline"])
    out = _setup_output(cfg, "gen")
    pano_res = (cfg["pano_res"], max(cfg["pano_res"] // 2, 2))
    # Pair i draws from substream (seed, "gen", i) no matter which thread runs it.
    pair_seed = int(substream(cfg["seed"], "gen").integers(0, 2**63 - 1))

    def one(i: int) -> dict:
        pair, panos = generate_pair(
            scene,
            i,
            pair_seed,
            cfg["cone"],
            cfg["baseline"],
            cfg["fov"],
            cfg["res"],
            pano_res,
            cfg["max_rotation"],
            keep_panos=cfg["panos"],
        )
        rec = write_pair(pair, out)
        if panos:
            for k, p in enumerate(panos):
                save_png(p.color, out / f"{pair.id}_pano{k}.png")
                save_depth(p.depth, out / f"{pair.id}_pano{k}_range.f32")
                rec[f"pano{k}"] = f"{pair.id}_pano{k}.png"
        return rec

    with ThreadPoolExecutor(max_workers=cfg["threads"]) as pool:
        records = list(pool.map(one, range(cfg["pairs"])))
    write_manifest(records, out / "manifest.jsonl")

    overlaps = np.array([r["overlap"] for r in records])
    edges = np.linspace(0.0, 1.0, 6)
    counts, _ = np.histogram(overlaps, bins=edges)
    summary = {
        "pairs": len(records),
        "overlap_histogram": {f"{lo:.1f}-{hi:.1f}": int(c) for lo, hi, c in zip(edges[:-1], edges[1:], counts)},
        "mean_overlap": float(overlaps.mean()),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {len(records)} pairs to {out / 'manifest.jsonl'}")
    for bucket, c in summary["overlap_histogram"].items():
        print(f"  overlap {bucket}: {c}")
    return EXIT_OK


def cmd_fit(cfg: dict) -> int:
    from dirpose.grid_fit import FitConfig, fit_direction, fit_rotation
    from dirpose.losses import LossWeights
    from dirpose.plotting import plot_distribution, plot_loss_trace
    from dirpose.so3 import axis_angle
    from dirpose.sphere_grid import GridSpec, SphericalDistribution

    fit_cfg = FitConfig(
        learning_rate=cfg["lr"],
        steps=cfg["steps"],
        activation=cfg["activation"],
        weights=LossWeights(cfg["lambda_d"], cfg["lambda_sigma"]),
        seed=cfg["seed"],
        init_scale=cfg["init_scale"],
        optimizer=cfg["optimizer"],
    )
    spec = GridSpec(cfg["grid"], cfg["grid"])
    out = _setup_output(cfg, "fit")
    if cfg["mode"] == "dir":
        target = _vec3(cfg["target"])
        report = fit_direction(target, cfg["kappa"], spec, fit_cfg)
        payload = {"mode": "dir", "target": (target / np.linalg.norm(target)).tolist(), **report.to_dict()}
    else:
        axis = _vec3(cfg["axis"]) if cfg["axis"] else substream(cfg["seed"], "fit-axis").standard_normal(3)
        target_r = axis_angle(axis, np.radians(cfg["angle"]))
        variant = "svd9d" if cfg["mode"] == "rot9d" else "gs6d"
        _, report = fit_rotation(target_r, cfg["kappa"], spec, fit_cfg, variant)
        payload = {
            "mode": cfg["mode"],
            "target_rotation": target_r.ravel().tolist(),
            "geodesic_error_deg": report.angular_error_deg,
            **report.to_dict(),
        }
    (out / "fit_report.json").write_text(json.dumps(payload, indent=2) + "\n")
    report.write_trace_csv(out / "loss_trace.csv")
    plot_loss_trace(report.loss_trace, out / "loss_trace.png", title=cfg["mode"])
    for k, probs in enumerate(report.distributions):
        plot_distribution(SphericalDistribution.from_weights(spec, probs), out / f"distribution_{k}.png")
    print(f"{cfg['mode']}: angular error {report.angular_error_deg:.4f} deg, final loss {report.final_loss.total:.6g}")
    return EXIT_OK


def _build_predictors(name: str, cfg: dict):
    from dirpose.epipolar_eval import GridFitPredictor, OraclePredictor
    from dirpose.grid_fit import FitConfig
    from dirpose.sphere_grid import GridSpec

    if name in ("oracle", "perturbed"):
        return OraclePredictor(name), OraclePredictor(name)
    if name == "gridfit":
        spec = GridSpec(cfg["grid"], cfg["grid"])
        fit_cfg = FitConfig(steps=cfg["fit_steps"], seed=int(substream(cfg["seed"], "gridfit").integers(0, 2**31)))
        return (
            GridFitPredictor("rotation", cfg["kappa"], spec, fit_cfg),
            GridFitPredictor("translation", cfg["kappa"], spec, fit_cfg),
        )
    raise UsageError(f"unknown predictor {name!r} (choose oracle, perturbed or gridfit)")


def cmd_pipeline(cfg: dict) -> int:
    from dirpose.epipolar_eval import results_table, run_two_stage, write_results_csv
    from dirpose.pano import load_pair, read_manifest
    from dirpose.plotting import plot_error_vs_overlap, plot_error_vs_rotation

    if not cfg["manifest"]:
        raise UsageError("--manifest is required")
    manifest = Path(cfg["manifest"])
    records = read_manifest(manifest)
    if cfg["pairs_limit"]:
        records = records[: cfg["pairs_limit"]]
    names = [n.strip() for n in str(cfg["predictor"]).split(",") if n.strip()]
    predictors = {n: _build_predictors(n, cfg) for n in names}
    out = _setup_output(cfg, "pipeline")
    pairs = [load_pair(r, manifest.parent) for r in records]

    runs = []
    for name in names:
        perturb = cfg["perturb"] if cfg["perturb"] is not None else PREDICTOR_PERTURB[name]
        rot_p, trans_p = predictors[name]
        run = run_two_stage(
            pairs,
            rot_p,
            trans_p,
            perturb_deg=perturb,
            rng=substream(cfg["seed"], f"pipeline-{name}"),
            warp_images=cfg["warp"],
            threads=cfg["threads"],
            method=name,
        )
        runs.append(run)
        for r in run.skipped:
            print(f"{name}: skipped {r.id}: {r.message}", file=sys.stderr)

    rows = results_table(runs)
    write_results_csv(rows, out / "results.csv")
    per_pair = {run.method: [r.to_dict() for r in run.results] for run in runs}
    (out / "per_pair.json").write_text(json.dumps(per_pair, indent=1) + "\n")
    plot_error_vs_rotation(runs, out / "error_vs_rotation.png")
    plot_error_vs_overlap(runs, out / "error_vs_overlap.png")

    print(f"{'method':<12}{'mean_rot':>10}{'med_rot':>10}{'rank_rot':>10}{'mean_t':>10}{'med_t':>10}{'rank_t':>10}")
    for row in rows:
        print(
            f"{row['method']:<12}{row['mean_rot']:>10.4g}{row['med_rot']:>10.4g}{row['rank_rot']:>10.3g}"
            f"{row['mean_trans']:>10.4g}{row['med_trans']:>10.4g}{row['rank_trans']:>10.3g}"
        )
    return EXIT_OK


def covisible_points(pair, n: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``n`` image-1 pixels whose surface point is visible in image 0."""
    from dirpose.camera import pixel_grid, project, unproject

    k = pair.intrinsics
    pix = pixel_grid(k.width, k.height)
    order = rng.permutation(len(pix))
    chosen = []
    st = pair.baseline_m * pair.pose.translation
    for idx in order:
        if len(chosen) >= n:
            break
        x1 = pix[idx]
        d = pair.depth1.data[int(x1[1]), int(x1[0]), 0] if pair.depth1 is not None else 1.0
        x0 = unproject(k, x1[None], np.array([d])) - st
        x0 = x0 @ pair.pose.rotation  # R^T (X1 - s t), row form
        if x0[0, 2] <= 0:
            continue
        p = project(k, x0)[0]
        if 0 <= p[0] <= k.width - 1 and 0 <= p[1] <= k.height - 1:
            chosen.append(x1)
    return np.array(chosen, dtype=float).reshape(-1, 2)


def cmd_viz(cfg: dict) -> int:
    from dirpose.camera import RelativePose, save_png
    from dirpose.epipolar_eval import render_epipolar_overlay
    from dirpose.pano import load_pair, read_manifest
    from dirpose.plotting import save_overlay_figure

    if not cfg["manifest"]:
        raise UsageError("--manifest is required")
    if cfg["points"] < 0:
        raise UsageError("--points must be non-negative")
    manifest = Path(cfg["manifest"])
    records = read_manifest(manifest)
    by_id = {r["id"]: r for r in records}
    pair_id = cfg["pair"] or records[0]["id"]
    if pair_id not in by_id:
        raise UsageError(f"unknown pair id {pair_id!r}")
    pair = load_pair(by_id[pair_id], manifest.parent)
    poses = [("ground truth", pair.pose)]
    if cfg["results"]:
        per_pair = json.loads(Path(cfg["results"]).read_text())
        for method, results in per_pair.items():
            for r in results:
                if r["id"] == pair_id and "R" in r:
                    poses.append((method, RelativePose(np.reshape(r["R"], (3, 3)), np.asarray(r["t"]))))
    out = _setup_output(cfg, "viz")
    points = covisible_points(pair, cfg["points"], substream(cfg["seed"], "viz", zlib.crc32(pair_id.encode())))
    img0, img1 = render_epipolar_overlay(pair, poses, points)
    save_png(img0, out / f"{pair_id}_overlay_img0.png")
    save_png(img1, out / f"{pair_id}_overlay_img1.png")
    save_overlay_figure(img0, img1, out / f"{pair_id}_overlay.png", titles=("image 0: epipolar lines", "image 1: points"))
    (out / f"{pair_id}_overlay_points.json").write_text(
        json.dumps({"pair": pair_id, "points": points.tolist(), "poses": [n for n, _ in poses]}, indent=1) + "\n"
    )
    print(f"wrote overlays for {pair_id} ({len(points)} points, {len(poses)} poses) to {out}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "pipeline": cmd_pipeline, "viz": cmd_viz}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    _setup_console(bool(args.get("verbose")))
    try:
        cfg = resolve_config(command, args)
        code = COMMANDS[command](cfg)
        log.info("%s finished", command)
        return code
    except UsageError as exc:
        print(f"dirpose {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedFit as exc:
        print(f"dirpose {command}: fit diverged at step {exc.step}", file=sys.stderr)
        return EXIT_NUMERIC
    except DirPoseError as exc:
        print(f"dirpose {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        _close_run_log()


if __name__ == "__main__":
    sys.exit(main())
