"""Command-line front end: file-based pipeline from synthetic scenes to pressure maps.

Exit status is 0 on success, 1 for invalid arguments or data, 2 for
unreadable, missing or malformed files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, features, flow, georef, learn, pressure, synth
from .analytics import temporal_smoothness, write_count_report
from .density import DEFAULT_GT_SIGMA, estimate_density, rasterize_ground_truth, read_annotations, write_annotations
from .grids import FormatError, load_image, read_cgrid, to_uint8, write_cgrid, write_pgm

logger = logging.getLogger("crowdmesa")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors become exit status 1 instead of argparse's 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_FMT = argparse.ArgumentDefaultsHelpFormatter


# --------------------------------------------------------------------------- helpers


def _pmap(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _frame_name(path) -> str:
    return Path(path).stem


def _read_counts(path) -> dict[str, float]:
    """``frame,count`` CSV as written by ``estimate``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["frame", "count"]:
            raise FormatError(f"{path}: count CSV must start with header 'frame,count'")
        for lineno, row in enumerate(reader, start=2):
            if not row or row[0].startswith("#"):
                continue
            try:
                out[row[0].strip()] = float(row[1])
            except (IndexError, ValueError):
                raise FormatError(f"{path}:{lineno}: malformed count row") from None
    return out


def _load_world(path, channels: int = 1) -> georef.WorldGrid:
    """Read an ESRI ASCII world grid; 2-channel grids are the ``_0``/``_1`` file pair."""
    p = Path(path)
    if channels == 1:
        return georef.import_esri_ascii(p)
    parts = [georef.import_esri_ascii(p.with_name(f"{p.stem}_{c}{p.suffix}")) for c in range(channels)]
    for g in parts[1:]:
        if g.spec != parts[0].spec:
            raise FormatError(f"{path}: channel files are on different grids")
    return georef.WorldGrid(parts[0].spec, np.stack([g.values for g in parts], axis=2), parts[0].nodata)


def _parse_grid(text: str, cell_size: float, epsg: int) -> georef.GridSpec:
    try:
        e0, n0, w, h = text.split(",")
        return georef.GridSpec(float(e0), float(n0), cell_size, int(w), int(h), epsg)
    except ValueError:
        raise UsageError(f"--grid expects E0,N0,WIDTH,HEIGHT (north-west corner), got {text!r}") from None


def _footprint_grid(mapping, width: int, height: int, cell_size: float, epsg: int) -> georef.GridSpec:
    """Grid covering the world footprint of every pixel center of a ``width`` x ``height`` image."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    e, n, ok = mapping.to_world(xx, yy)
    if not ok.any():
        raise ValueError("no pixel of the image reaches the terrain plane")
    return georef.GridSpec.covering(e[ok], n[ok], cell_size, epsg=epsg)


# --------------------------------------------------------------------------- synth


def _scene_files(out: Path, scene: synth.Scene) -> dict:
    name = scene.annotations.frame
    conf = out / "conf" / f"{name}.cgrid"
    img = out / "image" / f"{name}.cgrid"
    write_cgrid(conf, scene.confidence)
    write_cgrid(img, scene.image)
    return {"frame": name, "n_persons": len(scene.annotations), "seed": scene.seed,
            "confidence": str(conf.relative_to(out)), "image": str(img.relative_to(out))}


def cmd_synth(a) -> None:
    out = _outdir(a.out)
    if a.kind == "scenes":
        _outdir(out / "conf")
        _outdir(out / "image")
        scenes = synth.generate_scene_set(a.n_scenes, a.mean, a.std, a.width, a.height, a.seed, prefix=a.prefix)
        entries = [_scene_files(out, s) for s in scenes]
        write_annotations(out / "annotations.csv", [s.annotations for s in scenes])
        manifest = {"kind": "scenes", "seed": a.seed, "width": a.width, "height": a.height,
                    "mean": a.mean, "std": a.std, "frames": entries, "annotations": "annotations.csv",
                    "rng": "numpy Philox"}
    elif a.kind == "sequence":
        for sub in ("conf", "image", "gt"):
            _outdir(out / sub)
        if a.motion == "uniform":
            spec = synth.VelocitySpec.uniform(a.vx, a.vy)
        elif a.motion == "opposing":
            spec = synth.VelocitySpec.opposing(a.speed)
        else:
            spec = synth.VelocitySpec.rotation(a.omega)
        margin = a.margin
        if margin is None:
            # keep everyone inside the frame for the whole sequence
            steps = a.n_frames - 1
            if a.motion == "uniform":
                travel = steps * max(abs(a.vx), abs(a.vy))
            elif a.motion == "opposing":
                travel = steps * abs(a.speed)
            else:
                travel = min(1.0, steps * abs(a.omega)) * np.hypot(a.width, a.height) / 2
            margin = travel + 2.0
        scene = synth.generate_scene(a.n_persons, a.width, a.height, a.seed, margin=margin)
        seq = synth.generate_sequence(scene, spec, a.n_frames, seed=a.seed + 1, noise_std=a.noise_std)
        entries = []
        for t, (img, conf, ann) in enumerate(zip(seq.frames, seq.confidences, seq.annotations)):
            write_cgrid(out / "image" / f"{ann.frame}.cgrid", img)
            write_cgrid(out / "conf" / f"{ann.frame}.cgrid", conf)
            entries.append({"frame": ann.frame, "n_persons": len(ann),
                            "image": f"image/{ann.frame}.cgrid", "confidence": f"conf/{ann.frame}.cgrid"})
        write_annotations(out / "annotations.csv", seq.annotations)
        gt = None
        if a.gap < a.n_frames:
            gt = f"gt/displacement_gap{a.gap}.cgrid"
            write_cgrid(out / gt, seq.gt_displacement(a.gap))
        manifest = {"kind": "sequence", "seed": a.seed, "width": a.width, "height": a.height,
                    "velocity": spec.to_dict(), "noise_std": a.noise_std, "gap": a.gap,
                    "gt_displacement": gt, "frames": entries, "annotations": "annotations.csv",
                    "rng": "numpy Philox"}
    else:
        _outdir(out / "features")
        _outdir(out / "gt")
        if a.weights:
            w_star = np.array([float(x) for x in a.weights.split(",")])
            if len(w_star) != a.k:
                raise UsageError(f"--weights has {len(w_star)} entries but --k is {a.k}")
        else:
            w_star = synth.make_rng(a.seed + 1).uniform(0.0, 0.01, a.k)
        train = synth.generate_planted_training(a.n_frames, a.k, w_star, a.seed, a.width, a.height, prefix=a.prefix)
        entries = []
        for inst in train:
            features.write_feature_map(out / "features" / f"{inst.frame}.cfeat", inst.features)
            write_cgrid(out / "gt" / f"{inst.frame}.cgrid", inst.gt)
            entries.append({"frame": inst.frame, "features": f"features/{inst.frame}.cfeat",
                            "gt_density": f"gt/{inst.frame}.cgrid", "gt_count": float(inst.gt.sum())})
        manifest = {"kind": "planted", "seed": a.seed, "k": a.k, "width": a.width, "height": a.height,
                    "w_star": [float(x) for x in w_star], "frames": entries, "rng": "numpy Philox"}
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(manifest['frames'])} frames to {out}")


# --------------------------------------------------------------------------- features


def cmd_features(a) -> None:
    out = _outdir(a.out_dir)
    if a.op == "quantize-conf":
        def run(path):
            fmap = features.quantize_confidences(read_cgrid(path), a.min_conf, a.max_conf, a.bins)
            features.write_feature_map(out / f"{_frame_name(path)}.cfeat", fmap)
        _pmap(run, a.inputs, a.threads)
    elif a.op == "descriptors":
        def run(path):
            write_cgrid(out / f"{_frame_name(path)}.cgrid", features.dense_descriptors(load_image(path), a.patch))
        _pmap(run, a.inputs, a.threads)
    elif a.op == "codebook":
        maps = [read_cgrid(p) for p in a.inputs]
        samples = features.sample_descriptors(maps, a.samples, seed=a.seed)
        book = features.build_codebook(samples, a.k, seed=a.seed, max_iter=a.max_iter)
        features.write_codebook(out / "codebook.cbook", book)
        _write_json(out / "codebook.json", {"k": book.size, "seed": a.seed, "iterations": book.iterations,
                                            "distortion": book.distortion, "n_samples": int(len(samples))})
    elif a.op == "quantize-desc":
        if not a.codebook:
            raise UsageError("quantize-desc needs --codebook")
        book = features.read_codebook(a.codebook)

        def run(path):
            fmap = features.quantize_descriptors(read_cgrid(path), book)
            features.write_feature_map(out / f"{_frame_name(path)}.cfeat", fmap)
        _pmap(run, a.inputs, a.threads)
    else:
        # inputs are directories holding same-named feature maps, one vocabulary each
        dirs = [Path(p) for p in a.inputs]
        names = sorted(p.name for p in dirs[0].glob("*.cfeat"))
        if not names:
            raise UsageError(f"no .cfeat files in {dirs[0]}")
        for name in names:
            stacked = features.stack_feature_maps([features.read_feature_map(d / name) for d in dirs])
            features.write_feature_map(out / name, stacked)
    print(f"features {a.op}: {len(a.inputs)} inputs -> {out}")


# --------------------------------------------------------------------------- learn / estimate


def cmd_learn(a) -> None:
    feats = [features.read_feature_map(p) for p in a.features]
    names = [_frame_name(p) for p in a.features]
    if a.gt:
        if len(a.gt) != len(a.features):
            raise UsageError(f"{len(a.gt)} --gt files for {len(a.features)} feature maps")
        gts = [read_cgrid(p) for p in a.gt]
    elif a.annotations:
        ann = read_annotations(a.annotations)
        gts = []
        for name, fm in zip(names, feats):
            if name not in ann:
                logger.warning("frame %s has no annotations; training it as empty", name)
                gts.append(np.zeros((fm.height, fm.width)))
                continue
            ann[name].check_bounds(fm.width, fm.height)
            gts.append(rasterize_ground_truth(ann[name], a.sigma_gt, fm.width, fm.height))
    else:
        raise UsageError("learn needs --annotations or --gt")
    train = [learn.TrainingInstance(f, g, n) for f, g, n in zip(feats, gts, names)]
    model, diag = learn.learn_weights(
        train, reg=a.reg, lambda_fit=a.lambda_fit, lambda1=a.lambda1, eps_cut=a.eps_cut,
        max_outer=a.max_outer, solver=a.inner, threads=a.threads,
    )
    learn.save_model(model, a.out)
    report = {k: v for k, v in diag.summary().items() if k != "seconds"}
    report.update({
        "reg": a.reg, "lambda_fit": a.lambda_fit, "lambda1": a.lambda1, "eps_cut": a.eps_cut,
        "sigma_gt": a.sigma_gt, "frames": names, "objectives": diag.objectives,
        "mesa": [float(x) for x in diag.mesa], "nonzero_weights": int((model.weights > 0).sum()),
    })
    _write_json(Path(a.out).with_suffix(".json"), report)
    print(f"learned {a.reg} model in {diag.seconds:.1f}s: {diag.iterations} rounds, "
          f"objective {report['objective']:.6g}, converged={diag.converged}")


def cmd_estimate(a) -> None:
    model = learn.load_model(a.model)
    out = _outdir(a.out_dir)

    def run(path):
        fmap = features.read_feature_map(path)
        model.check_layout(fmap)
        d = estimate_density(fmap, model)
        write_cgrid(out / f"{_frame_name(path)}.cgrid", d)
        return _frame_name(path), float(d.sum())

    rows = _pmap(run, a.features, a.threads)
    with open(out / "counts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "count"])
        for name, c in rows:
            w.writerow([name, repr(c)])
    for name, c in rows:
        print(f"{name} {c:.4f}")


def cmd_eval(a) -> None:
    est = _read_counts(a.counts)
    if a.annotations:
        ann = read_annotations(a.annotations)
        gt = {f: float(len(ann[f])) if f in ann else 0.0 for f in est}
    else:
        gt = _read_counts(a.gt_counts)
    missing = [f for f in est if f not in gt]
    if missing:
        raise UsageError(f"no ground truth for frames {missing[:5]}")
    frames = list(est)
    errs = write_count_report(a.out, frames, [gt[f] for f in frames], [est[f] for f in frames])
    summary = {"mae": errs.mae, "mean_pct": errs.mean_pct, "frames": errs.n_frames,
               "zero_gt_frames": errs.n_zero_gt}
    if len(frames) >= 2:
        summary["temporal_smoothness"] = temporal_smoothness([est[f] for f in frames])
    _write_json(Path(a.out).with_suffix(".json"), summary)
    print(" ".join(f"{k}={v:.6g}" for k, v in summary.items()))


# --------------------------------------------------------------------------- flow


def cmd_flow(a) -> None:
    p = flow.FlowParams(lambda_=a.lambda_, theta=a.theta, tau=a.tau, warps=a.warps, iterations=a.iterations,
                        scale=a.scale, gap=a.gap, avg_window=a.avg_window)
    if len(a.frames) <= p.gap:
        raise UsageError(f"need more than --gap={p.gap} frames, got {len(a.frames)}")
    frames = [flow.to_gray(load_image(f)) for f in a.frames]
    out = _outdir(a.out_dir)
    pairs = list(range(len(frames) - p.gap))
    flows = _pmap(lambda t: flow.tvl1_flow(frames[t], frames[t + p.gap], p), pairs, a.threads)
    index = []
    for t, f in zip(pairs, flows):
        name = f"flow_{t:05d}.cgrid"
        write_cgrid(out / name, f)
        index.append({"file": name, "from": _frame_name(a.frames[t]), "to": _frame_name(a.frames[t + p.gap]),
                      "mean_dx": float(f[:, :, 0].mean()), "mean_dy": float(f[:, :, 1].mean())})
    averages = []
    if len(flows) >= p.avg_window:
        for t, f in enumerate(flow.windowed_averages(flows, p.avg_window)):
            name = f"avg_{t:05d}.cgrid"
            write_cgrid(out / name, f)
            averages.append({"file": name, "first_flow": t, "n_flows": p.avg_window})
    else:
        logger.warning("only %d flows; no %d-flow averages written", len(flows), p.avg_window)
    _write_json(out / "flows.json", {"gap": p.gap, "avg_window": p.avg_window, "flows": index,
                                     "averages": averages})
    print(f"wrote {len(index)} flows and {len(averages)} averages to {out}")


# --------------------------------------------------------------------------- georef / pressure


def cmd_georef(a) -> None:
    mapping = georef.read_mapping(a.mapping)
    out = _outdir(a.out_dir)
    first = read_cgrid(a.inputs[0])
    h, w = first.shape[:2]
    spec = (_parse_grid(a.grid, a.cell_size, a.epsg) if a.grid
            else _footprint_grid(mapping, w, h, a.cell_size, a.epsg))
    meta = {"grid": {"origin_e": spec.origin_e, "origin_n": spec.origin_n, "cell_size": spec.cell_size,
                     "width": spec.width, "height": spec.height, "epsg": spec.epsg}, "frames": []}
    if a.mode == "density":
        for path in a.inputs:
            wg = georef.rectify_density(read_cgrid(path), mapping, spec, a.sigma_w)
            georef.export_world_grid(wg, out / f"{_frame_name(path)}.asc", a.format)
            meta["frames"].append({"frame": _frame_name(path), **wg.meta})
    else:
        mapping2 = georef.read_mapping(a.mapping2) if a.mapping2 else mapping
        dt = georef.frame_interval(a.gap, a.fps)
        for path in a.inputs:
            wg = georef.rectify_motion(read_cgrid(path), mapping, mapping2, dt, spec)
            georef.export_world_grid(wg, out / f"{_frame_name(path)}.asc", a.format)
            v = wg.values[wg.valid]
            meta["frames"].append({"frame": _frame_name(path), **wg.meta,
                                   "mean_speed": float(np.hypot(v[:, 0], v[:, 1]).mean()) if len(v) else None})
    _write_json(out / f"georef_{a.mode}.json", meta)
    print(f"rectified {len(a.inputs)} {a.mode} grids onto {spec.width}x{spec.height} cells")


def cmd_pressure(a) -> None:
    if len(a.density) != len(a.velocity):
        raise UsageError(f"{len(a.density)} density grids but {len(a.velocity)} velocity grids")
    if a.t_window < 1:
        raise UsageError("--t-window must be at least 1")
    out = _outdir(a.out_dir)
    vels = [_load_world(p, 2) for p in a.velocity]
    rows = []
    for t, dpath in enumerate(a.density):
        rho = georef.density_per_m2(_load_world(dpath))
        window = vels[max(0, t - a.t_window + 1):t + 1]
        var = pressure.velocity_variance(window, a.radius_m)
        p = pressure.pressure_map(rho, var)
        name = _frame_name(dpath)
        georef.export_world_grid(p, out / f"pressure_{name}.asc")
        rows.append((name, *pressure.max_pressure(p)))
    with open(out / "max_pressure.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "max_pressure", "row", "col", "east", "north"])
        for name, val, r, c, e, n in rows:
            w.writerow([name, repr(val), r, c, repr(e), repr(n)])
    print(f"wrote {len(rows)} pressure maps to {out}")


def cmd_render(a) -> None:
    src = Path(a.input)
    if src.suffix.lower() == ".asc":
        wg = georef.import_esri_ascii(src)
        values, nodata = wg.values, wg.nodata
    else:
        values, nodata = read_cgrid(src), None
        if values.ndim == 3:
            if a.channel is None:
                values = np.sqrt((values.astype(np.float64) ** 2).sum(axis=2))
            elif not 0 <= a.channel < values.shape[2]:
                raise UsageError(f"--channel {a.channel} out of range for {values.shape[2]} channels")
            else:
                values = values[:, :, a.channel]
    write_pgm(a.out, to_uint8(np.asarray(values, dtype=np.float64), nodata))
    print(f"wrote {a.out}")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="crowdmesa", description="Crowd density learning, motion and pressure maps.",
                 formatter_class=_FMT)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for per-frame work")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic scenes, sequences or planted training sets",
                       formatter_class=_FMT)
    s.add_argument("kind", choices=("scenes", "sequence", "planted"))
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=synth.DEFAULT_SCENE_SIZE[0])
    s.add_argument("--height", type=int, default=synth.DEFAULT_SCENE_SIZE[1])
    s.add_argument("--prefix", default="f", help="frame name prefix (scenes, planted)")
    s.add_argument("--n-scenes", type=int, default=12, help="scenes: number of scenes")
    s.add_argument("--mean", type=float, default=263.0, help="scenes: mean persons per scene")
    s.add_argument("--std", type=float, default=7.3, help="scenes: std of persons per scene")
    s.add_argument("--n-persons", type=int, default=50, help="sequence: persons in the scene")
    s.add_argument("--n-frames", type=int, default=15, help="sequence/planted: number of frames")
    s.add_argument("--motion", choices=("uniform", "opposing", "rotation"), default="uniform",
                   help="sequence: motion model")
    s.add_argument("--vx", type=float, default=0.0, help="sequence: uniform x velocity (px/frame)")
    s.add_argument("--vy", type=float, default=0.0, help="sequence: uniform y velocity (px/frame)")
    s.add_argument("--speed", type=float, default=0.5, help="sequence: opposing stream speed (px/frame)")
    s.add_argument("--omega", type=float, default=0.002, help="sequence: rotation rate (rad/frame)")
    s.add_argument("--margin", type=float,
                   help="sequence: border kept free of persons at frame 0 (default: distance travelled + 2 px)")
    s.add_argument("--noise-std", type=float, default=0.0, help="sequence: image noise std")
    s.add_argument("--gap", type=int, default=flow.DEFAULT_GAP, help="sequence: gap of the GT displacement file")
    s.add_argument("--k", type=int, default=32, help="planted: vocabulary size")
    s.add_argument("--weights", help="planted: comma-separated planted weights (default: random)")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("features", help="feature extraction and quantization", formatter_class=_FMT)
    f.add_argument("op", choices=("quantize-conf", "descriptors", "codebook", "quantize-desc", "stack"))
    f.add_argument("inputs", nargs="+",
                   help="input files (directories of .cfeat files for 'stack', one per vocabulary)")
    f.add_argument("--out-dir", required=True)
    f.add_argument("--min-conf", type=float, default=features.DEFAULT_MIN_CONF,
                   help="lower saturation bound for detector confidences")
    f.add_argument("--max-conf", type=float, default=features.DEFAULT_MAX_CONF,
                   help="upper saturation bound for detector confidences")
    f.add_argument("--bins", type=int, default=features.DEFAULT_BINS, help="confidence bins")
    f.add_argument("--patch", type=int, default=16, help="descriptor patch size (px)")
    f.add_argument("--k", type=int, default=features.DEFAULT_CODEBOOK_SIZE, help="codebook size")
    f.add_argument("--samples", type=int, default=100000, help="descriptors sampled for k-means")
    f.add_argument("--max-iter", type=int, default=50, help="k-means iterations")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--codebook", help="codebook file for quantize-desc")
    f.set_defaults(func=cmd_features)

    lp = sub.add_parser("learn", help="train a density model by MESA-distance minimization",
                        formatter_class=_FMT)
    lp.add_argument("features", nargs="+", help="training feature maps (.cfeat); file stem = frame name")
    lp.add_argument("--annotations", help="frame,x,y CSV of person positions")
    lp.add_argument("--gt", nargs="+", help="GT density CGRIDs, one per feature map (instead of annotations)")
    lp.add_argument("--out", required=True, help="model file; a .json report is written next to it")
    lp.add_argument("--reg", choices=learn.REGULARIZERS, default="l1", help="regularizer (tik = Tikhonov)")
    lp.add_argument("--lambda-fit", type=float, default=learn.DEFAULT_LAMBDA_FIT, help="weight of the MESA term")
    lp.add_argument("--lambda1", type=float, default=learn.DEFAULT_LAMBDA1, help="L1 strength")
    lp.add_argument("--eps-cut", type=float, default=learn.DEFAULT_EPS_CUT,
                    help="convergence tolerance on box violations (persons)")
    lp.add_argument("--max-outer", type=int, default=learn.DEFAULT_MAX_OUTER, help="cutting-plane round limit")
    lp.add_argument("--sigma-gt", type=float, default=DEFAULT_GT_SIGMA, help="GT Gaussian sigma (px)")
    lp.add_argument("--inner", choices=("exact", "subgradient"), default="exact",
                    help="solver for the restricted problem")
    lp.set_defaults(func=cmd_learn)

    e = sub.add_parser("estimate", help="density maps and counts from a model", formatter_class=_FMT)
    e.add_argument("features", nargs="+")
    e.add_argument("--model", required=True)
    e.add_argument("--out-dir", required=True, help="densities as <frame>.cgrid plus counts.csv")
    e.set_defaults(func=cmd_estimate)

    ev = sub.add_parser("eval", help="count errors and temporal smoothness", formatter_class=_FMT)
    ev.add_argument("--counts", required=True, help="frame,count CSV from estimate")
    g = ev.add_mutually_exclusive_group(required=True)
    g.add_argument("--annotations", help="frame,x,y CSV; GT count = points per frame")
    g.add_argument("--gt-counts", help="frame,count CSV of GT counts")
    ev.add_argument("--out", required=True, help="report CSV; a .json summary is written next to it")
    ev.set_defaults(func=cmd_eval)

    fl = sub.add_parser("flow", help="TV-L1 optical flow over an ordered frame list", formatter_class=_FMT)
    fl.add_argument("frames", nargs="+", help="ordered frames (.pgm or CGRID)")
    fl.add_argument("--out-dir", required=True)
    fl.add_argument("--gap", type=int, default=flow.DEFAULT_GAP, help="frames between the two images of a pair")
    fl.add_argument("--avg-window", type=int, default=flow.DEFAULT_AVG_WINDOW,
                    help="consecutive flows averaged per output")
    d = flow.FlowParams()
    fl.add_argument("--lambda", dest="lambda_", type=float, default=d.lambda_, help="data term weight")
    fl.add_argument("--theta", type=float, default=d.theta, help="coupling parameter")
    fl.add_argument("--tau", type=float, default=d.tau, help="dual step size")
    fl.add_argument("--warps", type=int, default=d.warps, help="warps per pyramid level")
    fl.add_argument("--iterations", type=int, default=d.iterations, help="iterations per warp")
    fl.add_argument("--scale", type=float, default=d.scale, help="pyramid downsampling factor")
    fl.set_defaults(func=cmd_flow)

    gr = sub.add_parser("georef", help="rectify density or flow onto a world grid", formatter_class=_FMT)
    gr.add_argument("mode", choices=("density", "motion"))
    gr.add_argument("inputs", nargs="+", help="density CGRIDs (persons/px) or flow CGRIDs (px)")
    gr.add_argument("--mapping", required=True, help="HOMOG or POSE mapping file (motion: start frame)")
    gr.add_argument("--mapping2", help="motion: mapping of the end frame (default: same as --mapping)")
    gr.add_argument("--out-dir", required=True)
    gr.add_argument("--cell-size", type=float, default=georef.DEFAULT_CELL_SIZE, help="world cell size (m)")
    gr.add_argument("--sigma-w", type=float, default=georef.DEFAULT_SIGMA_W,
                    help="density smoothing sigma (cells)")
    gr.add_argument("--epsg", type=int, default=georef.DEFAULT_EPSG, help="EPSG code of the world frame")
    gr.add_argument("--grid", help="E0,N0,WIDTH,HEIGHT of the world grid (default: image footprint)")
    gr.add_argument("--gap", type=int, default=flow.DEFAULT_GAP, help="motion: frames spanned by each flow")
    gr.add_argument("--fps", type=float, default=25.0, help="motion: frame rate")
    gr.add_argument("--format", choices=("esri_ascii", "geojson_points"), default="esri_ascii")
    gr.set_defaults(func=cmd_georef)

    pr = sub.add_parser("pressure", help="pressure maps P = density x velocity variance", formatter_class=_FMT)
    pr.add_argument("--density", nargs="+", required=True,
                    help="world density grids (.asc, persons per cell), one per frame")
    pr.add_argument("--velocity", nargs="+", required=True,
                    help="world velocity grids, one per frame, named by their base path (reads <stem>_0/_1.asc)")
    pr.add_argument("--out-dir", required=True)
    pr.add_argument("--radius-m", type=float, default=pressure.DEFAULT_RADIUS_M, help="spatial window radius (m)")
    pr.add_argument("--t-window", type=int, default=pressure.DEFAULT_T_WINDOW,
                    help="velocity fields per variance (the current and preceding ones)")
    pr.set_defaults(func=cmd_pressure)

    r = sub.add_parser("render", help="8-bit PGM heatmap of a density, flow or world grid", formatter_class=_FMT)
    r.add_argument("input", help="CGRID or ESRI ASCII file")
    r.add_argument("--out", required=True)
    r.add_argument("--channel", type=int, help="channel to show (default: magnitude over channels)")
    r.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
