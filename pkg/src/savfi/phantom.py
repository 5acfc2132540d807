"""Moving speckle phantoms: random point scatterers advected by a flow scene."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .flowfield import Region, Scene

WAVELENGTH_M = 1540.0 / 8e6
DEFAULT_DENSITY_PER_MM2 = 20.0 / (WAVELENGTH_M * 1e3) ** 2


@dataclass
class ScattererCloud:
    """Point scatterers; ``positions`` is ``[N, 2]`` as ``(x, z)`` metres."""

    positions: np.ndarray
    amplitudes: np.ndarray
    region: Region
    rng: np.random.Generator | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.amplitudes = np.asarray(self.amplitudes, dtype=float).reshape(-1)
        if len(self.positions) != len(self.amplitudes):
            raise ValueError("positions and amplitudes differ in length")

    def __len__(self):
        return len(self.amplitudes)

    def to_array(self) -> np.ndarray:
        """``[N, 3]`` array of ``(x, z, amplitude)`` for serialization."""
        return np.column_stack([self.positions, self.amplitudes])

    @classmethod
    def from_array(cls, arr, region: Region, rng=None) -> "ScattererCloud":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[:, :2].copy(), arr[:, 2].copy(), region, rng)

    def union(self, other: "ScattererCloud") -> "ScattererCloud":
        return ScattererCloud(
            np.vstack([self.positions, other.positions]),
            np.concatenate([self.amplitudes, other.amplitudes]),
            self.region,
            self.rng,
        )


def seed_scatterers(region: Region, density: float, rng: np.random.Generator) -> ScattererCloud:
    """Uniform scatterers with standard-normal amplitudes.

    ``density`` is in scatterers per mm^2; ``N = round(density * area)``.
    The generator is kept on the cloud and reused for respawning during
    advection, so a cloud's whole history follows from one seed.
    """
    if not density > 0:
        raise ValueError("density must be positive")
    area_mm2 = region.area * 1e6
    if not area_mm2 > 0:
        raise ValueError(f"zero-area region {region}")
    n = max(1, int(round(density * area_mm2)))
    x = rng.uniform(region.x0, region.x1, n)
    z = rng.uniform(region.z0, region.z1, n)
    amp = rng.standard_normal(n)
    return ScattererCloud(np.column_stack([x, z]), amp, region, rng)


def _xz_velocity(scene: Scene, pos, t):
    v = scene.velocity(pos, t, check=False)
    return np.stack([v[..., 1], v[..., 0]], axis=-1)


def _inflow_respawn(scene, region, n, rng, t, band):
    """Positions in a thin boundary band where the flow points inward.

    Falls back to uniform positions in the region when no inflow band is
    found (e.g. a scene with no flow through the boundary).
    """
    out = np.empty((0, 2))
    for _ in range(50):
        m = 4 * n
        side = rng.integers(0, 4, m)
        s = rng.random(m)
        d = rng.random(m) * band
        x = np.where(side == 0, region.x0 + d, np.where(side == 1, region.x1 - d,
                     region.x0 + s * region.width))
        z = np.where(side == 2, region.z0 + d, np.where(side == 3, region.z1 - d,
                     region.z0 + s * region.height))
        pos = np.column_stack([x, z])
        v = _xz_velocity(scene, pos, t)
        inward = np.choose(side, [v[:, 0], -v[:, 0], v[:, 1], -v[:, 1]])
        out = np.vstack([out, pos[inward > 0]])
        if len(out) >= n:
            return out[:n]
    x = rng.uniform(region.x0, region.x1, n - len(out))
    z = rng.uniform(region.z0, region.z1, n - len(out))
    return np.vstack([out, np.column_stack([x, z])])


def advect(cloud: ScattererCloud, scene: Scene, t: float, dt: float) -> ScattererCloud:
    """One RK2 midpoint step of length ``dt`` starting at time ``t``.

    Scatterers that leave ``cloud.region`` are replaced one-for-one by new
    scatterers (fresh amplitude) drawn from the cloud's own generator. New
    scatterers enter through the inflow side of the boundary, within the
    distance the fastest scatterer travelled this step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    p = cloud.positions
    v1 = _xz_velocity(scene, p, t)
    mid = p + 0.5 * dt * v1
    v2 = _xz_velocity(scene, mid, t + 0.5 * dt)
    new = p + dt * v2
    amp = cloud.amplitudes.copy()
    out = ~cloud.region.contains(new, tol=0.0)
    n_out = int(out.sum())
    if n_out:
        rng = cloud.rng if cloud.rng is not None else np.random.default_rng(0)
        band = max(float(np.abs(dt * v2).max()), 1e-9)
        new[out] = _inflow_respawn(scene, cloud.region, n_out, rng, t + dt, band)
        amp[out] = rng.standard_normal(n_out)
    return replace(cloud, positions=new, amplitudes=amp)
