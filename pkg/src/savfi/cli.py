"""Command-line entry point: ``savfi <stage> [options]``.

Every stage reads and writes tensor files. Exit codes: 0 success, 1 usage
error, 2 configuration error, 3 data error; ``repro`` exits 4 when it ran
but a gate failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataio
from .beamform import ImageGrid, beamform_frames, bmode
from .clutter import svd_filter
from .cnn.train import infer, load_params, save_params, train
from .cnn.data import to_arrays
from .config import ConfigError, PipelineConfig, format_config, load_config
from .echopiv import piv_pyramid
from .flowfield import SCENARIOS
from .metrics import epe, summarize
from .pipeline import generate_dataset, load_windows, manifest_pairs
from .repro import SCALES, pair_truths, run_repro, simulate_nominal, write_channel
from .ussim import ChannelData, channel_meta_to_probe

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_GATE = 1, 2, 3, 4

log = logging.getLogger("savfi")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers -------------------------------------------------------------------


def _read(path):
    try:
        return dataio.read_tensor(path)
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {path}") from exc


def _write_estimate(path, v, valid, pitch, frame_dt, source):
    dataio.write_tensor(path, np.asarray(v, dtype=np.float32))
    valid_path = Path(str(path).removesuffix(".vfit") + "_valid.vfit")
    dataio.write_tensor(valid_path, np.asarray(valid, dtype=np.float32))
    dataio.write_sidecar(path, {"pitch_m": float(pitch), "frame_dt_s": float(frame_dt),
                                "source": source})


def _meta_float(meta, key, default):
    return float(meta[key]) if key in meta else default


def _stack_meta(path, cfg):
    """Pitch and frame interval from an IQ sidecar, else from the config."""
    try:
        meta = dataio.read_sidecar(path)
    except dataio.MissingFileError:
        meta = {}
    return (_meta_float(meta, "pitch_m", cfg.grid.pitch_m),
            _meta_float(meta, "frame_dt_s", cfg.probe.frame_dt))


def _as_stack(iq):
    if iq.ndim == 2:
        raise DataError("need at least two frames, got a single image")
    if iq.ndim != 3 or iq.shape[0] < 2:
        raise DataError(f"expected a frame stack [F, H, W] with F >= 2, got {iq.shape}")
    return iq


# -- stages ----------------------------------------------------------------------


def cmd_gen_data(args, cfg: PipelineConfig):
    tags = args.scene.split(",") if args.scene else list(cfg.scene.tags)
    for t in tags:
        if t not in SCENARIOS:
            raise ConfigError(f"unknown scene {t!r}; choose from {', '.join(SCENARIOS)}")
    seed = cfg.seed if args.seed is None else args.seed
    m = generate_dataset(args.out, tags, args.count, seed, cfg.probe, cfg.grid, cfg.scene)
    print(f"wrote {len(m.entries)} windows to {args.out}")


def cmd_simulate(args, cfg):
    seed = cfg.stage_seed("simulate") if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    channel, ws = simulate_nominal(args.scene, cfg, seed, args.frames)
    write_channel(out / "channels.vfit", channel)
    meta = channel.meta()
    meta.update({"grid_x_m": 0.0, "grid_z_m": cfg.scene.depth_m})
    dataio.write_sidecar(out / "channels.vfit", meta)
    dataio.write_tensor(out / "truth.vfit", ws.frames.astype(np.float32))
    dataio.write_tensor(out / "mask.vfit", ws.mask.astype(np.float32))
    dataio.write_sidecar(out / "truth.vfit", {"pitch_m": cfg.grid.pitch_m,
                                              "frame_dt_s": cfg.probe.frame_dt})
    print(f"simulated {channel.n_events} events into {out}")


def cmd_beamform(args, cfg):
    samples = _read(args.input)
    meta = dataio.read_sidecar(args.input)
    if samples.ndim != 3:
        raise DataError(f"channel data must be [events, elements, time], got {samples.shape}")
    probe = channel_meta_to_probe(meta)
    if samples.shape[1] != probe.n_elements:
        raise DataError("element count in data and sidecar differ")
    sources = np.array([int(float(s)) for s in meta["sources"].split(",")])
    channel = ChannelData(samples, float(meta["fs"]), float(meta["t0"]), sources, probe)
    center = (_meta_float(meta, "grid_x_m", 0.0), _meta_float(meta, "grid_z_m",
                                                             cfg.scene.depth_m))
    grid = ImageGrid.centered(center, cfg.grid.size, cfg.grid.pitch_m)
    iq = beamform_frames(channel, grid, cfg.grid.f_number)
    dataio.write_tensor(args.out, iq.data.astype(np.complex64))
    dataio.write_sidecar(args.out, {"pitch_m": grid.pitch, "frame_dt_s": iq.frame_dt})
    print(f"beamformed {iq.data.shape[0]} frames to {args.out}")


def cmd_svd_filter(args, cfg):
    iq = _as_stack(_read(args.input))
    low = cfg.svd.low_cut if args.low_cut is None else args.low_cut
    high = cfg.svd.high_cut if args.high_cut is None else args.high_cut
    try:
        out = svd_filter(iq, low, high)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    dataio.write_tensor(args.out, out.astype(np.complex64))
    pitch, dt = _stack_meta(args.input, cfg)
    dataio.write_sidecar(args.out, {"pitch_m": pitch, "frame_dt_s": dt})


def cmd_piv(args, cfg):
    from dataclasses import replace

    kw = {}
    if args.window is not None:
        kw["window"] = args.window
    if args.iterations is not None:
        kw["iterations"] = args.iterations
    if args.on_bmode:
        kw["on_bmode"] = True
    try:
        pcfg = replace(cfg.piv, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    iq = _as_stack(_read(args.input))
    pitch, dt = _stack_meta(args.input, cfg)
    ests = [piv_pyramid(iq[k], iq[k + 1], pcfg, pitch, dt) for k in range(iq.shape[0] - 1)]
    v = np.stack([e.v for e in ests])
    valid = np.stack([e.valid for e in ests])
    if len(ests) == 1:
        v, valid = v[0], valid[0]
    _write_estimate(args.out, v, valid, pitch, dt, "piv")
    print(f"estimated {len(ests)} frame pair(s) into {args.out}")


def cmd_train(args, cfg):
    manifest = dataio.load_manifest(args.manifest)
    if not manifest.entries:
        raise DataError("training manifest is empty")
    x, t, m = to_arrays(manifest_pairs(manifest, augment=True))
    val = None
    if args.val_manifest:
        vm = dataio.load_manifest(args.val_manifest)
        xv, tv, _ = to_arrays(manifest_pairs(vm, augment=False))
        val = (xv, tv)
    tcfg = cfg.train
    if args.epochs is not None:
        from dataclasses import replace

        tcfg = replace(tcfg, epochs=args.epochs)
    result = train(cfg.net, x, t, tcfg, masks=m, validation=val)
    save_params(args.out, cfg.net, result.params)
    curve = Path(args.out) / "loss_curve.txt"
    lines = [f"epoch={i} loss={l!r}" + (f" val_epe={result.val_epe[i]!r}" if val else "")
             for i, l in enumerate(result.losses)]
    curve.write_text("\n".join(lines) + "\n")
    print(f"trained {tcfg.epochs} epochs on {len(x)} patches; best epoch {result.best_epoch}")


def cmd_infer(args, cfg):
    spec, params = load_params(args.model)
    iq = _as_stack(_read(args.input))
    pitch, dt = _stack_meta(args.input, cfg)
    ests = [infer(spec, params, iq[k], iq[k + 1], pitch, dt) for k in range(iq.shape[0] - 1)]
    v = np.stack([e.v for e in ests])
    valid = np.stack([e.valid for e in ests])
    if len(ests) == 1:
        v, valid = v[0], valid[0]
    _write_estimate(args.out, v, valid, pitch, dt, "cnn")
    print(f"inferred {len(ests)} frame pair(s) into {args.out}")


def _align_truth(truth, est):
    """Truth matched to the estimate: per frame, per pair, or the first pair."""
    if truth.shape == est.shape:
        return truth
    if truth.ndim == 4 and est.ndim == 4 and est.shape[0] == truth.shape[0] - 1:
        return pair_truths(truth)
    if truth.ndim == 4 and est.ndim == 3 and truth.shape[1:] == est.shape:
        return pair_truths(truth)[:1].reshape(est.shape)
    raise DataError(f"estimate {est.shape} does not match truth {truth.shape}")


def _eval_pairs(truth, est, mask, masked):
    truth = _align_truth(truth, est)
    if truth.ndim == 3:
        truth, est = truth[None], est[None]
    return [epe(t, e, mask if masked else None) for t, e in zip(truth, est)]


def cmd_eval(args, cfg):
    jobs = []
    if args.manifest:
        manifest = dataio.load_manifest(args.manifest)
        est_dir = Path(args.estimates)
        for iq, truth, mask, e in load_windows(manifest):
            est_path = est_dir / (Path(e.input).name.removesuffix(".vfit") + "_est.vfit")
            jobs.append((truth, _read(est_path), mask, e.tag))
    else:
        if not (args.truth and args.estimate):
            raise UsageError("eval needs --manifest/--estimates or --truth/--estimate")
        mask = _read(args.mask) > 0.5 if args.mask else None
        jobs.append((_read(args.truth), _read(args.estimate), mask, args.tag))
    lines = []
    variants = [False, True] if all(j[2] is not None for j in jobs) else [False]
    for masked in variants:
        vals = []
        for truth, est, mask, _ in jobs:
            try:
                vals.extend(_eval_pairs(truth, est, mask, masked))
            except ValueError as exc:
                raise DataError(str(exc)) from exc
        tag = args.tag + ("-masked" if masked else "")
        lines.append(summarize(vals, masked=masked, tag=tag).line())
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def _svg(v, valid, shape, step, pgm_name, scale):
    h, w = shape
    rows = range(step // 2, h, step)
    cols = range(step // 2, w, step)
    speed = np.hypot(v[0], v[1])
    vmax = speed[valid].max() if valid.any() and speed[valid].max() > 0 else 1.0
    arrows = []
    for r in rows:
        for c in cols:
            dz, dx = v[0, r, c] / vmax * step * scale, v[1, r, c] / vmax * step * scale
            arrows.append(
                f'<line x1="{c:.2f}" y1="{r:.2f}" x2="{c + dx:.2f}" y2="{r + dz:.2f}" '
                f'stroke="red" stroke-width="0.6" marker-end="url(#head)"/>'
            )
    return len(arrows), (
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'xmlns:xlink="http://www.w3.org/1999/xlink" width="{w * 4}" height="{h * 4}" '
        f'viewBox="0 0 {w} {h}">\n'
        '<defs><marker id="head" markerWidth="4" markerHeight="4" refX="3" refY="2" '
        'orient="auto"><path d="M0,0 L4,2 L0,4 z" fill="red"/></marker></defs>\n'
        f'<image xlink:href="{pgm_name}" x="0" y="0" width="{w}" height="{h}"/>\n'
        + "\n".join(arrows) + "\n</svg>\n"
    )


def write_pgm(path, img8: np.ndarray):
    h, w = img8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img8, dtype=np.uint8).tobytes())


def cmd_plot(args, cfg):
    v = _read(args.input)
    if v.ndim == 4:
        v = v[args.index]
    if v.ndim != 3 or v.shape[0] != 2:
        raise DataError(f"expected a velocity field [2, H, W], got {v.shape}")
    shape = v.shape[1:]
    valid_path = Path(str(args.input).removesuffix(".vfit") + "_valid.vfit")
    valid = np.ones(shape, bool)
    if valid_path.exists():
        vv = dataio.read_tensor(valid_path)
        valid = (vv[args.index] if vv.ndim == 3 else vv) > 0.5
    if args.background:
        bg = _read(args.background)
        if bg.ndim == 3:
            bg = bg[min(args.index, bg.shape[0] - 1)]
        if bg.shape != shape:
            raise DataError("background and velocity grids differ")
        db = bmode(bg, args.dynamic_range)
        img = np.round((db + args.dynamic_range) / args.dynamic_range * 255)
    else:
        speed = np.hypot(v[0], v[1])
        peak = speed.max()
        img = np.round(speed / peak * 255) if peak > 0 else np.zeros(shape)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    pgm = prefix.with_suffix(".pgm")
    write_pgm(pgm, np.clip(img, 0, 255).astype(np.uint8))
    n, svg = _svg(v, valid, shape, args.step, pgm.name, args.arrow_scale)
    prefix.with_suffix(".svg").write_text(svg)
    print(f"wrote {pgm} and {prefix.with_suffix('.svg')} ({n} arrows)")


def cmd_repro(args, cfg):
    scale = SCALES[args.scale]
    gates, lines = run_repro(cfg, args.out, scale)
    print("\n".join(lines))
    return 0 if all(g.passed for g in gates) else EXIT_GATE


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS/FFT thread count; 1 gives the deterministic mode")
    common.add_argument("--verbose", action="store_true")

    p = _Parser(prog="savfi", description="Synthetic-aperture vector flow imaging pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="simulate a training dataset")
    s.add_argument("--scene", help="comma-separated scene tags")
    s.add_argument("--count", type=int, default=4, help="windows per scene")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("simulate", parents=[common], help="RF channel data for one scene")
    s.add_argument("--scene", choices=SCENARIOS, default="straight90")
    s.add_argument("--frames", type=int, default=5)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("beamform", parents=[common], help="channel data to complex frames")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_beamform)

    s = sub.add_parser("svd-filter", parents=[common], help="SVD clutter filter")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--low-cut", type=int)
    s.add_argument("--high-cut", type=int)
    s.set_defaults(func=cmd_svd_filter)

    s = sub.add_parser("piv", parents=[common], help="Echo-PIV on consecutive frames")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--on-bmode", action="store_true")
    s.set_defaults(func=cmd_piv)

    s = sub.add_parser("train", parents=[common], help="train the flow network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--val-manifest")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True, help="model directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="network velocity estimates")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="endpoint-error report")
    s.add_argument("--truth")
    s.add_argument("--estimate")
    s.add_argument("--mask")
    s.add_argument("--manifest")
    s.add_argument("--estimates", help="directory of <input>_est.vfit files")
    s.add_argument("--tag", default="all")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", parents=[common], help="quiver plot as PGM + SVG")
    s.add_argument("--input", required=True)
    s.add_argument("--background", help="IQ frame or stack for a B-mode background")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--step", type=int, default=8)
    s.add_argument("--arrow-scale", type=float, default=1.0)
    s.add_argument("--dynamic-range", type=float, default=60.0)
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("repro", parents=[common], help="run every stage and check the gates")
    s.add_argument("--seed", type=int)
    s.add_argument("--scale", choices=sorted(SCALES), default="quick")
    s.add_argument("--out", default="repro_out")
    s.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.command == "repro" and args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        if args.command == "repro":
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "config.txt").write_text(format_config(cfg))
        with threadpool_limits(args.threads):
            code = args.func(args, cfg)
        return int(code or 0)
    except UsageError as exc:
        print(f"savfi: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"savfi: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, dataio.TensorFormatError, dataio.ManifestError, FileNotFoundError,
            KeyError) as exc:
        print(f"savfi: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
