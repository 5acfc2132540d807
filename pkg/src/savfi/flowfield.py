"""Analytic ground-truth flow scenes and random window sampling.

Conventions used throughout the package:

* positions are ``(x, z)`` pairs in metres, ``x`` lateral and ``z`` axial
  (depth, positive away from the probe);
* velocities are ``(v_axial, v_lateral)`` pairs in m/s, i.e. ``(vz, vx)``.

Arrays of positions have a trailing axis of length 2 and may carry any
leading shape; velocities are returned with the same leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PULSE_PERIOD_S = 0.9


class OutsideRegionError(ValueError):
    """Raised when a scene is evaluated outside its bounding box."""


class NoAdmissiblePoseError(RuntimeError):
    pass


@dataclass(frozen=True)
class Region:
    """Axis-aligned bounding box ``[x0, x1] x [z0, z1]`` in metres."""

    x0: float
    x1: float
    z0: float
    z1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.z1 - self.z0

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, pos, tol: float = 1e-12) -> np.ndarray:
        pos = np.asarray(pos, dtype=float)
        x, z = pos[..., 0], pos[..., 1]
        return (
            (x >= self.x0 - tol)
            & (x <= self.x1 + tol)
            & (z >= self.z0 - tol)
            & (z <= self.z1 + tol)
        )


def raised_cosine_waveform(t, period: float = PULSE_PERIOD_S):
    """Pulsatile multiplier in [0.25, 1.5] with one beat per ``period``."""
    t = np.asarray(t, dtype=float)
    w = 0.25 + 0.75 * (0.5 - 0.5 * np.cos(2 * np.pi * t / period)) * 1.667
    return np.clip(w, 0.25, 1.5)


@dataclass(frozen=True)
class Pulsatility:
    period: float = PULSE_PERIOD_S

    def __call__(self, t):
        return raised_cosine_waveform(t, self.period)

    @property
    def max(self) -> float:
        return 1.5


class Scene:
    """Base class of immutable velocity scenes.

    Subclasses implement ``_steady(pos)`` returning the velocity with the
    waveform at unity and ``support(pos)`` returning a boolean mask.
    """

    region: Region
    pulsatility: Pulsatility | None

    def _steady(self, pos: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def support(self, pos) -> np.ndarray:
        raise NotImplementedError

    def scale(self, t) -> float:
        return 1.0 if self.pulsatility is None else float(self.pulsatility(t))

    def velocity(self, pos, t: float = 0.0, check: bool = True) -> np.ndarray:
        pos = np.asarray(pos, dtype=float)
        if check and not np.all(self.region.contains(pos)):
            bad = pos[~self.region.contains(pos)] if pos.ndim > 1 else pos
            raise OutsideRegionError(
                f"position {np.asarray(bad).reshape(-1, 2)[0]} outside region {self.region}"
            )
        return self._steady(pos) * self.scale(t)

    @property
    def peak_speed(self) -> float:
        raise NotImplementedError


def eval_flow(scene: Scene, position, time: float = 0.0) -> np.ndarray:
    """Velocity ``(v_axial, v_lateral)`` of ``scene`` at ``position`` and ``time``."""
    return scene.velocity(position, time)


def _default_region(center, half) -> Region:
    cx, cz = center
    return Region(cx - half, cx + half, cz - half, cz + half)


@dataclass(frozen=True)
class StraightVessel(Scene):
    """Poiseuille flow in a straight vessel.

    ``angle_deg`` is the beam-to-flow angle: 90 gives purely lateral flow,
    0 purely axial (towards depth). The profile is
    ``peak_velocity * (1 - r**2 / radius**2)`` inside the lumen, zero outside.
    """

    angle_deg: float = 90.0
    radius: float = 3e-3
    peak_velocity: float = 0.1
    center: tuple[float, float] = (0.0, 0.02)
    region: Region | None = None
    pulsatility: Pulsatility | None = None

    def __post_init__(self):
        if self.region is None:
            object.__setattr__(self, "region", _default_region(self.center, 4 * self.radius))

    @property
    def axis(self) -> np.ndarray:
        a = np.deg2rad(self.angle_deg)
        return np.array([np.sin(a), np.cos(a)])

    def _radial(self, pos):
        d = pos - np.asarray(self.center)
        ax = self.axis
        along = d[..., 0] * ax[0] + d[..., 1] * ax[1]
        perp = d - along[..., None] * ax
        return np.hypot(perp[..., 0], perp[..., 1])

    def support(self, pos):
        return self._radial(np.asarray(pos, dtype=float)) < self.radius

    def _steady(self, pos):
        r = self._radial(pos)
        prof = np.where(r < self.radius, self.peak_velocity * (1 - (r / self.radius) ** 2), 0.0)
        ax = self.axis
        return np.stack([prof * ax[1], prof * ax[0]], axis=-1)

    @property
    def peak_speed(self):
        return self.peak_velocity * (1.0 if self.pulsatility is None else self.pulsatility.max)


@dataclass(frozen=True)
class SpinningDisk(Scene):
    """Rigid rotation ``v = omega x r`` inside a disk, zero outside.

    Positive ``angular_velocity`` turns +x into +z.
    """

    angular_velocity: float = 30.0
    radius: float = 5e-3
    center: tuple[float, float] = (0.0, 0.02)
    region: Region | None = None
    pulsatility: Pulsatility | None = None

    def __post_init__(self):
        if self.region is None:
            object.__setattr__(self, "region", _default_region(self.center, 1.5 * self.radius))

    def support(self, pos):
        d = np.asarray(pos, dtype=float) - np.asarray(self.center)
        return np.hypot(d[..., 0], d[..., 1]) < self.radius

    def _steady(self, pos):
        d = pos - np.asarray(self.center)
        inside = np.hypot(d[..., 0], d[..., 1]) < self.radius
        vx = np.where(inside, -self.angular_velocity * d[..., 1], 0.0)
        vz = np.where(inside, self.angular_velocity * d[..., 0], 0.0)
        return np.stack([vz, vx], axis=-1)

    @property
    def peak_speed(self):
        s = abs(self.angular_velocity) * self.radius
        return s * (1.0 if self.pulsatility is None else self.pulsatility.max)


@dataclass(frozen=True)
class Composite(Scene):
    """Union of scenes with disjoint supports."""

    scenes: tuple = ()
    region: Region | None = None
    pulsatility: Pulsatility | None = None

    def __post_init__(self):
        object.__setattr__(self, "scenes", tuple(self.scenes))
        if not self.scenes:
            raise ValueError("Composite needs at least one scene")
        if self.region is None:
            rs = [s.region for s in self.scenes]
            object.__setattr__(
                self,
                "region",
                Region(
                    min(r.x0 for r in rs),
                    max(r.x1 for r in rs),
                    min(r.z0 for r in rs),
                    max(r.z1 for r in rs),
                ),
            )

    def support(self, pos):
        pos = np.asarray(pos, dtype=float)
        out = np.zeros(pos.shape[:-1], dtype=bool)
        for s in self.scenes:
            out |= s.support(pos)
        return out

    def velocity(self, pos, t=0.0, check=True):
        pos = np.asarray(pos, dtype=float)
        if check and not np.all(self.region.contains(pos)):
            raise OutsideRegionError(f"position outside region {self.region}")
        v = np.zeros(pos.shape[:-1] + (2,))
        for s in self.scenes:
            m = s.support(pos)
            if np.any(m):
                v[m] = s.velocity(pos[m], t, check=False)
        return v * self.scale(t)

    @property
    def peak_speed(self):
        p = max(s.peak_speed for s in self.scenes)
        return p * (1.0 if self.pulsatility is None else self.pulsatility.max)


# -- window sampling ----------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    center: tuple[float, float]
    orientation: float
    start_time: float

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """World directions of the window's lateral and axial unit vectors."""
        c, s = np.cos(self.orientation), np.sin(self.orientation)
        return np.array([c, s]), np.array([-s, c])

    def to_world(self, local) -> np.ndarray:
        """Map window-frame ``(u, w)`` positions to world ``(x, z)``."""
        local = np.asarray(local, dtype=float)
        eu, ew = self.axes
        return (
            np.asarray(self.center)
            + local[..., 0:1] * eu
            + local[..., 1:2] * ew
        )

    def velocity_to_local(self, v_world) -> np.ndarray:
        """Rotate world ``(vz, vx)`` vectors into window ``(vw, vu)``."""
        v_world = np.asarray(v_world)
        vx, vz = v_world[..., 1], v_world[..., 0]
        eu, ew = self.axes
        vu = vx * eu[0] + vz * eu[1]
        vw = vx * ew[0] + vz * ew[1]
        return np.stack([vw, vu], axis=-1)


def window_coords(size: int, pitch: float) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center offsets (metres) of a ``size`` x ``size`` window about its center."""
    off = (np.arange(size) - (size - 1) / 2) * pitch
    return off, off


def local_grid(size: int, pitch: float) -> np.ndarray:
    """``[size, size, 2]`` window-frame ``(u, w)`` positions; row index is depth."""
    u, w = window_coords(size, pitch)
    ww, uu = np.meshgrid(w, u, indexing="ij")
    return np.stack([uu, ww], axis=-1)


@dataclass(frozen=True)
class PosedScene(Scene):
    """A scene viewed through a window pose, re-centred at ``origin``.

    Position ``origin + (u, w)`` maps to the world point ``pose.to_world((u, w))``
    and velocities are expressed in the window frame. Used to place a sampled
    window in front of the simulated probe.
    """

    base: Scene = None
    pose: Pose = None
    origin: tuple[float, float] = (0.0, 0.0)
    half_extent: float = 3.2e-3
    region: Region | None = None
    pulsatility: Pulsatility | None = None

    def __post_init__(self):
        if self.region is None:
            object.__setattr__(self, "region", _default_region(self.origin, self.half_extent))

    def _world(self, pos):
        return self.pose.to_world(np.asarray(pos, dtype=float) - np.asarray(self.origin))

    def support(self, pos):
        return self.base.support(self._world(pos))

    def velocity(self, pos, t=0.0, check=True):
        pos = np.asarray(pos, dtype=float)
        if check and not np.all(self.region.contains(pos)):
            raise OutsideRegionError(f"position outside region {self.region}")
        v = self.base.velocity(self._world(pos), self.pose.start_time + t, check=check)
        return self.pose.velocity_to_local(v)

    @property
    def peak_speed(self):
        return self.base.peak_speed


@dataclass
class WindowSample:
    frames: np.ndarray  # [n_frames, 2, size, size], (axial, lateral) m/s
    pose: Pose
    pitch: float
    frame_dt: float
    mask: np.ndarray = field(default=None)  # [size, size] bool support

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _corners_fit(region: Region, pose: Pose, half: float) -> bool:
    corners = np.array([[-half, -half], [half, -half], [-half, half], [half, half]])
    return bool(np.all(region.contains(pose.to_world(corners), tol=0.0)))


def sample_window(
    scene: Scene,
    rng: np.random.Generator,
    size: int = 128,
    n_frames: int = 5,
    pitch: float = 5e-5,
    frame_dt: float = 1e-3,
    margin: float = 0.0,
    orientation: float | None = None,
    center: Sequence[float] | None = None,
    start_time: float | None = None,
    period: float = PULSE_PERIOD_S,
    max_attempts: int = 1000,
) -> WindowSample:
    """Draw a random window pose and evaluate the ground truth on it.

    The pose (center, orientation, start time) is drawn uniformly and
    rejected until the rotated window, grown by ``margin`` metres on every
    side, fits inside the scene region. Any of the three pose components
    may be fixed by the caller.

    Returns
    -------
    WindowSample
        ``frames[k]`` holds the field at ``start_time + k * frame_dt`` in
        window coordinates, channel 0 axial and channel 1 lateral.
    """
    half = size * pitch / 2 + margin
    reg = scene.region
    for _ in range(max_attempts):
        theta = rng.uniform(0, 2 * np.pi) if orientation is None else float(orientation)
        if center is None:
            c = (rng.uniform(reg.x0, reg.x1), rng.uniform(reg.z0, reg.z1))
        else:
            c = (float(center[0]), float(center[1]))
        t0 = rng.uniform(0, period) if start_time is None else float(start_time)
        pose = Pose(c, theta, t0)
        if _corners_fit(reg, pose, half):
            break
    else:
        raise NoAdmissiblePoseError(
            f"no admissible pose for a {2 * half:.4g} m window in region {reg} "
            f"after {max_attempts} attempts"
        )

    world = pose.to_world(local_grid(size, pitch))
    frames = np.empty((n_frames, 2, size, size))
    for k in range(n_frames):
        v = scene.velocity(world, t0 + k * frame_dt)
        frames[k] = np.moveaxis(pose.velocity_to_local(v), -1, 0)
    return WindowSample(frames, pose, pitch, frame_dt, mask=scene.support(world))


# -- presets ------------------------------------------------------------------

SCENARIOS = ("straight90", "straight105", "disk")


def make_scene(tag: str, rng: np.random.Generator | None = None, depth: float = 0.02,
               pulsatile: bool = True, **overrides) -> Scene:
    """Build one of the preset scenarios, optionally with randomized parameters.

    With ``rng`` the peak speed and geometry are jittered so a dataset spans
    a range of displacements; without it the nominal values are used.
    """
    pul = Pulsatility() if pulsatile else None
    if tag in ("straight90", "straight105"):
        angle = 90.0 if tag == "straight90" else 105.0
        radius = 3e-3 if rng is None else rng.uniform(2.5e-3, 4e-3)
        peak = 0.08 if rng is None else rng.uniform(0.05, 0.1)
        kw = dict(angle_deg=angle, radius=radius, peak_velocity=peak,
                  center=(0.0, depth), pulsatility=pul)
        kw.update(overrides)
        return StraightVessel(**kw)
    if tag == "disk":
        radius = 5e-3 if rng is None else rng.uniform(4e-3, 6e-3)
        # rim speed between 0.05 and 0.1 m/s
        rim = 0.08 if rng is None else rng.uniform(0.05, 0.1)
        kw = dict(angular_velocity=rim / radius, radius=radius, center=(0.0, depth),
                  pulsatility=pul)
        if rng is not None and rng.random() < 0.5:
            kw["angular_velocity"] = -kw["angular_velocity"]
        kw.update(overrides)
        return SpinningDisk(**kw)
    raise ValueError(f"unknown scenario {tag!r}; expected one of {SCENARIOS}")
