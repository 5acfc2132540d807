"""Reproduction runs: every pipeline stage end to end, with measured gates.

Two scales are provided. ``quick`` runs every stage on a handful of
windows and is meant for determinism checks; its CNN gates only require
finite results. ``full`` runs the desk-scale benchmark with the real
thresholds.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataio
from .beamform import ImageGrid, beamform_frames
from .clutter import svd_filter
from .cnn.data import to_arrays
from .cnn.net import init_params
from .cnn.train import infer, save_params, train
from .config import PipelineConfig
from .echopiv import fit_rotation, piv_pyramid
from .flowfield import PosedScene, make_scene, sample_window
from .metrics import epe, summarize
from .phantom import DEFAULT_DENSITY_PER_MM2, seed_scatterers
from .pipeline import generate_dataset, load_windows, manifest_pairs
from .ussim import ChannelData, simulate_sequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReproScale:
    name: str
    train_windows: int  # totals, spread over the scene tags
    val_windows: int
    test_windows: int
    epochs: int
    holdout_train_windows: int
    holdout_test_windows: int
    holdout_epochs: int
    cnn_gates: bool


QUICK = ReproScale("quick", 3, 1, 3, 1, 2, 1, 1, cnn_gates=False)
# 32 training windows x 4 pairs x 4 variants = 512 patches; 16 x 4 = 64 test pairs.
FULL = ReproScale("full", 32, 4, 16, 360, 16, 8, 120, cnn_gates=True)
SCALES = {"quick": QUICK, "full": FULL}


@dataclass
class Gate:
    name: str
    measured: float
    threshold: str
    passed: bool

    def line(self) -> str:
        return (f"gate={self.name} measured={self.measured:.6g} threshold={self.threshold} "
                f"pass={'yes' if self.passed else 'no'}")


# -- single-sequence stages ---------------------------------------------------


def simulate_nominal(tag: str, cfg: PipelineConfig, seed: int, n_frames: int = 5):
    """Nominal scene, window centred on the flow, orientation 0; returns (channel, truth)."""
    rng = np.random.default_rng(seed)
    scene = make_scene(tag, None, depth=cfg.scene.depth_m, pulsatile=cfg.scene.pulsatile)
    center = getattr(scene, "center", (0.0, cfg.scene.depth_m))
    ws = sample_window(scene, rng, size=cfg.grid.size, n_frames=n_frames, pitch=cfg.grid.pitch_m,
                       frame_dt=cfg.probe.frame_dt, margin=cfg.scene.margin_m, orientation=0.0,
                       center=center)
    half = cfg.grid.size * cfg.grid.pitch_m / 2 + cfg.scene.margin_m
    posed = PosedScene(base=scene, pose=ws.pose, origin=(0.0, cfg.scene.depth_m),
                       half_extent=half)
    cloud = seed_scatterers(posed.region, cfg.scene.density_per_mm2 or DEFAULT_DENSITY_PER_MM2,
                            rng)
    t_start = -(cfg.probe.n_virtual_sources - 1) / 2 / cfg.probe.prf
    channel = simulate_sequence(posed, cloud, cfg.probe, n_frames, t_start=t_start, rng=rng)
    return channel, ws


def image_grid(cfg: PipelineConfig) -> ImageGrid:
    return ImageGrid.centered((0.0, cfg.scene.depth_m), cfg.grid.size, cfg.grid.pitch_m)


def piv_stack(iq, cfg: PipelineConfig):
    """PIV on consecutive pairs: ``(v [P,2,H,W], valid [P,H,W])``."""
    ests = [piv_pyramid(iq[k], iq[k + 1], cfg.piv, cfg.grid.pitch_m, cfg.probe.frame_dt)
            for k in range(len(iq) - 1)]
    return np.stack([e.v for e in ests]), np.stack([e.valid for e in ests])


def pair_truths(frames):
    frames = np.asarray(frames)
    return 0.5 * (frames[:-1] + frames[1:])


def write_channel(path, channel: ChannelData):
    dataio.write_tensor(path, channel.samples)
    dataio.write_sidecar(path, channel.meta())


def piv_physics(cfg: PipelineConfig, out: Path | None = None, seed: int | None = None):
    """Echo-PIV on nominal straight-90 and spinning-disk sequences.

    Returns ``(straight median EPE %, disk relative omega error, details)``.
    When ``out`` is given every intermediate tensor is written there.
    """
    seed = cfg.stage_seed("piv-physics") if seed is None else seed
    grid = image_grid(cfg)
    details = {}
    results = {}
    for tag in ("straight90", "disk"):
        channel, ws = simulate_nominal(tag, cfg, seed + (0 if tag == "straight90" else 1))
        iq = beamform_frames(channel, grid, cfg.grid.f_number).data
        v, valid = piv_stack(iq, cfg)
        truth = pair_truths(ws.frames)
        if out is not None:
            write_channel(out / f"{tag}_channels.vfit", channel)
            dataio.write_tensor(out / f"{tag}_iq.vfit", iq.astype(np.complex64))
            filt = svd_filter(iq, cfg.svd.low_cut, cfg.svd.high_cut)
            dataio.write_tensor(out / f"{tag}_iq_svd.vfit", filt.astype(np.complex64))
            dataio.write_tensor(out / f"{tag}_truth.vfit", ws.frames.astype(np.float32))
            dataio.write_tensor(out / f"{tag}_piv.vfit", v.astype(np.float32))
        if tag == "straight90":
            vals = [epe(t, e) for t, e in zip(truth, v)]
            results[tag] = float(np.median(vals))
            details["straight90_epe"] = vals
        else:
            scene = make_scene("disk", None, depth=cfg.scene.depth_m,
                               pulsatile=cfg.scene.pulsatile)
            c = (cfg.grid.size - 1) / 2
            fits = []
            for k in range(len(v)):
                omega_true = fit_rotation(truth[k], cfg.grid.pitch_m, (c, c), ws.mask)
                omega_hat = fit_rotation(v[k], cfg.grid.pitch_m, (c, c), ws.mask)
                fits.append((omega_hat, omega_true))
            fits = np.array(fits)
            rel = float(np.median(np.abs(fits[:, 0] - fits[:, 1]) / np.abs(fits[:, 1])))
            results[tag] = rel
            details["disk_omega"] = fits
            details["disk_nominal_omega"] = scene.angular_velocity
    return results["straight90"], results["disk"], details


# -- CNN benchmark --------------------------------------------------------------


def split_counts(total: int, n: int) -> list[int]:
    """``total`` spread over ``n`` groups, earlier groups taking the remainder."""
    return [total // n + (i < total % n) for i in range(n)]


def _dataset(out: Path, name: str, tags, total: int, seed: int, cfg: PipelineConfig):
    counts = split_counts(total, len(tags))
    return generate_dataset(out / name, tags, counts, seed, cfg.probe, cfg.grid, cfg.scene)


def _epe_lists(spec, params, manifest, masked: bool):
    vals = []
    for iq, truth, mask, _ in load_windows(manifest):
        for k in range(iq.shape[0] - 1):
            est = infer(spec, params, iq[k], iq[k + 1], manifest.pitch_m, manifest.frame_dt_s)
            t = 0.5 * (truth[k] + truth[k + 1])
            vals.append(epe(t, est.v, mask if masked else None))
    return vals


def cnn_benchmark(cfg: PipelineConfig, out: Path, scale: ReproScale, tags=None,
                  test_tags=None, name: str = "cnn", epochs: int | None = None,
                  train_windows: int | None = None, test_windows: int | None = None):
    """Generate data, train, and score untrained vs trained networks on held-out data.

    Returns a dict with the reports, timings and the trained parameters.
    """
    tags = tuple(tags or cfg.scene.tags)
    test_tags = tuple(test_tags or tags)
    out = Path(out) / name
    t_start = time.perf_counter()
    seed = cfg.stage_seed(f"{name}-data")
    n_train = scale.train_windows if train_windows is None else train_windows
    n_test = scale.test_windows if test_windows is None else test_windows
    train_m = _dataset(out, "train", tags, n_train, seed, cfg)
    val_m = _dataset(out, "val", test_tags, scale.val_windows, seed + 1, cfg)
    test_m = _dataset(out, "test", test_tags, n_test, seed + 2, cfg)
    t_data = time.perf_counter() - t_start

    x, t, m = to_arrays(manifest_pairs(train_m, augment=True))
    xv, tv, _ = to_arrays(manifest_pairs(val_m, augment=False))
    n_epochs = scale.epochs if epochs is None else epochs
    tcfg = replace(cfg.train, seed=cfg.stage_seed(f"{name}-train") % 2**32, epochs=n_epochs,
                   val_every=max(cfg.train.val_every, n_epochs // 20))
    spec = cfg.net
    untrained = init_params(spec, tcfg.seed)
    t0 = time.perf_counter()
    result = train(spec, x, t, tcfg, masks=m, validation=(xv, tv))
    t_train = time.perf_counter() - t0
    save_params(out / "model", spec, result.params)

    reports = {}
    for label, params in (("untrained", untrained), ("trained", result.params)):
        for masked in (False, True):
            vals = _epe_lists(spec, params, test_m, masked)
            tag = f"{name}-{label}{'-masked' if masked else ''}"
            reports[tag] = summarize(vals, masked=masked, tag=tag)
    return {
        "reports": reports,
        "losses": result.losses,
        "val_epe": result.val_epe,
        "best_epoch": result.best_epoch,
        "n_train": len(x),
        "n_test": reports[f"{name}-trained"].n,
        "time_data": t_data,
        "time_train": t_train,
        "time_total": time.perf_counter() - t_start,
        "params": result.params,
    }


# -- driver ---------------------------------------------------------------------


def run_repro(cfg: PipelineConfig, out, scale: ReproScale = QUICK) -> tuple[list[Gate], list[str]]:
    """Run all stages into ``out``; return the gates and report lines."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"scale={scale.name} seed={cfg.seed}"]
    gates = []

    (out / "physics").mkdir(exist_ok=True)
    piv_epe, omega_err, details = piv_physics(cfg, out / "physics")
    gates.append(Gate("piv_straight90_median_epe", piv_epe, "<=8", piv_epe <= 8.0))
    gates.append(Gate("piv_disk_omega_rel_error", omega_err, "<=0.1", omega_err <= 0.1))

    bench = cnn_benchmark(cfg, out, scale)
    for rep in bench["reports"].values():
        lines.append(rep.line())
    trained = bench["reports"]["cnn-trained"].median
    untrained = bench["reports"]["cnn-untrained"].median
    masked_ok = np.isfinite(bench["reports"]["cnn-trained-masked"].median)
    if scale.cnn_gates:
        gates.append(Gate("cnn_median_epe", trained, "<=15", trained <= 15.0))
        gates.append(Gate("cnn_vs_untrained_ratio", trained / untrained, "<=0.5",
                          trained <= 0.5 * untrained))
    else:
        gates.append(Gate("cnn_median_epe_finite", trained, "finite", bool(np.isfinite(trained))))
    gates.append(Gate("cnn_masked_epe_finite", bench["reports"]["cnn-trained-masked"].median,
                      "finite", bool(masked_ok)))

    tags = [t for t in cfg.scene.tags if t != "disk"]
    hold = cnn_benchmark(cfg, out, scale, tags=tags, test_tags=("disk",), name="holdout",
                         epochs=scale.holdout_epochs, train_windows=scale.holdout_train_windows,
                         test_windows=scale.holdout_test_windows)
    for rep in hold["reports"].values():
        lines.append(rep.line())
    h = hold["reports"]["holdout-trained"].median
    gates.append(Gate("holdout_disk_epe_finite", h, "finite", bool(np.isfinite(h))))
    lines.extend(g.line() for g in gates)
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return gates, lines
