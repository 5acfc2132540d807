"""End-to-end data generation: flow window -> speckle phantom -> RF -> IQ frames."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .beamform import ImageGrid, IqImage, beamform_frames
from .cnn.data import PairSample, augment_pair, pair_truth
from .config import GridConfig, SceneConfig, hash64
from .flowfield import PosedScene, Scene, WindowSample, make_scene, sample_window
from .phantom import DEFAULT_DENSITY_PER_MM2, seed_scatterers
from .ussim import ProbeConfig, simulate_sequence

log = logging.getLogger(__name__)


@dataclass
class SimulatedWindow:
    iq: IqImage  # complex stack [n_frames, H, W]
    truth: WindowSample  # m/s, window frame
    tag: str = ""
    seed: int = 0

    @property
    def mask(self) -> np.ndarray:
        return self.truth.mask

    def truth_px(self) -> np.ndarray:
        """Ground truth in pixels per frame, ``[n_frames, 2, H, W]``."""
        return self.truth.frames * self.truth.frame_dt / self.truth.pitch


def draw_window(scene: Scene, rng, grid: GridConfig, probe: ProbeConfig, margin: float,
                min_support: float = 0.0, n_frames: int = 5, max_tries: int = 200,
                **pose) -> WindowSample:
    """Random window whose flow support covers at least ``min_support`` of the pixels."""
    for _ in range(max_tries):
        ws = sample_window(scene, rng, size=grid.size, n_frames=n_frames, pitch=grid.pitch_m,
                           frame_dt=probe.frame_dt, margin=margin, **pose)
        speed = np.hypot(ws.frames[:, 0], ws.frames[:, 1])
        if ws.mask.mean() >= min_support and np.all(speed.reshape(n_frames, -1).max(1) > 0):
            return ws
    raise RuntimeError(f"no window with flow support >= {min_support} after {max_tries} draws")


def simulate_window(
    scene: Scene,
    window: WindowSample,
    probe: ProbeConfig,
    grid: GridConfig,
    rng,
    depth: float = 0.02,
    margin: float = 1e-3,
    density: float | None = None,
) -> IqImage:
    """Beamformed complex frames of the speckle phantom moving through ``window``.

    The window is re-centred at lateral 0 and depth ``depth`` in front of
    the probe. The phantom covers the window plus ``margin`` on each side.
    Events are timed so compounded frame ``k`` is centred on the ground
    truth time ``start_time + k * frame_dt``.
    """
    n_frames = window.n_frames
    half = grid.size * grid.pitch_m / 2 + margin
    posed = PosedScene(base=scene, pose=window.pose, origin=(0.0, depth), half_extent=half)
    cloud = seed_scatterers(posed.region, density or DEFAULT_DENSITY_PER_MM2, rng)
    n_src = probe.n_virtual_sources
    t_start = -(n_src - 1) / 2 / probe.prf
    channel = simulate_sequence(posed, cloud, probe, n_frames, t_start=t_start, rng=rng)
    img_grid = ImageGrid.centered((0.0, depth), grid.size, grid.pitch_m)
    return beamform_frames(channel, img_grid, grid.f_number)


def generate_window(tag: str, seed: int, probe: ProbeConfig = ProbeConfig(),
                    grid: GridConfig = GridConfig(), scene_cfg: SceneConfig = SceneConfig(),
                    n_frames: int = 5) -> SimulatedWindow:
    """One randomized scene of type ``tag``, one window, simulated and beamformed."""
    rng = np.random.default_rng(seed)
    scene = make_scene(tag, rng, depth=scene_cfg.depth_m, pulsatile=scene_cfg.pulsatile)
    ws = draw_window(scene, rng, grid, probe, scene_cfg.margin_m, scene_cfg.min_support,
                     n_frames)
    iq = simulate_window(scene, ws, probe, grid, rng, scene_cfg.depth_m, scene_cfg.margin_m,
                         scene_cfg.density_per_mm2)
    return SimulatedWindow(iq, ws, tag, seed)


def window_pairs(win: SimulatedWindow, augment: bool = True) -> list[PairSample]:
    """Consecutive-frame training pairs, optionally augmented."""
    truth = win.truth_px()
    out = []
    for k in range(win.iq.data.shape[0] - 1):
        s = PairSample(win.iq.data[k], win.iq.data[k + 1], pair_truth(truth, k).astype(np.float32),
                       win.mask, win.tag)
        out.extend(augment_pair(s) if augment else [s])
    return out


def window_seed(global_seed: int, tag: str, index: int) -> int:
    return hash64(global_seed, f"window:{tag}:{index}")


def generate_dataset(
    out_dir,
    tags,
    count,
    seed: int,
    probe: ProbeConfig = ProbeConfig(),
    grid: GridConfig = GridConfig(),
    scene_cfg: SceneConfig = SceneConfig(),
    n_frames: int = 5,
    manifest_name: str = "manifest.txt",
) -> dataio.DatasetManifest:
    """Write ``count`` windows per tag and a manifest describing them.

    ``count`` is either one number for every tag or a per-tag sequence.

    Each entry stores the complex frames ``[n_frames, H, W]``, the ground
    truth in m/s ``[n_frames, 2, H, W]`` and the flow-support mask ``[H, W]``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    counts = [count] * len(tags) if np.ndim(count) == 0 else list(count)
    if len(counts) != len(tags):
        raise ValueError("need one count per tag")
    for tag, n in zip(tags, counts):
        for i in range(int(n)):
            ws = window_seed(seed, tag, i)
            win = generate_window(tag, ws, probe, grid, scene_cfg, n_frames)
            stem = f"{tag}_{i:04d}"
            dataio.write_tensor(out / f"{stem}_iq.vfit", win.iq.data.astype(np.complex64))
            dataio.write_tensor(out / f"{stem}_truth.vfit", win.truth.frames.astype(np.float32))
            dataio.write_tensor(out / f"{stem}_mask.vfit", win.mask.astype(np.float32))
            entries.append(dataio.ManifestEntry(
                out / f"{stem}_iq.vfit", out / f"{stem}_truth.vfit", out / f"{stem}_mask.vfit",
                tag, ws,
            ))
            log.info("wrote %s", stem)
    manifest = dataio.DatasetManifest(entries, grid.pitch_m, probe.frame_dt)
    dataio.save_manifest(out / manifest_name, manifest)
    return manifest


def load_windows(manifest: dataio.DatasetManifest):
    """Yield ``(iq, truth_m_s, mask_or_None, entry)`` per manifest entry."""
    for e in manifest.entries:
        iq = dataio.read_tensor(e.input)
        truth = dataio.read_tensor(e.truth)
        mask = None if e.mask is None else dataio.read_tensor(e.mask) > 0.5
        yield iq, truth, mask, e


def manifest_pairs(manifest: dataio.DatasetManifest, augment: bool = True) -> list[PairSample]:
    """Training pairs from a manifest, truth converted to pixels per frame."""
    scale = manifest.frame_dt_s / manifest.pitch_m
    out = []
    for iq, truth, mask, e in load_windows(manifest):
        px = truth * scale
        for k in range(iq.shape[0] - 1):
            s = PairSample(iq[k], iq[k + 1], pair_truth(px, k).astype(np.float32), mask, e.tag)
            out.extend(augment_pair(s) if augment else [s])
    return out
