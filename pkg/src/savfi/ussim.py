"""Far-field pulse-echo simulation of a diverging-wave synthetic aperture sequence.

Each transmit event fires a diverging wave from a virtual point source behind
the array. A scatterer at ``p`` seen by element ``e`` returns the two-way
pulse delayed by::

    tau = (|p - p_v| - |p_0 - p_v| + |p - p_e|) / c

with ``p_0`` the array center, so ``t = 0`` is the moment the transmitted
wavefront crosses the array center. The pulse is referenced to its envelope
peak: a scatterer's echo envelope is centered on ``tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal.windows import tukey

from . import _kernels
from .flowfield import Region, Scene
from .phantom import ScattererCloud, advect

_UPSAMPLE = 4


@dataclass(frozen=True)
class ProbeConfig:
    n_elements: int = 128
    pitch: float = 2e-4
    f0: float = 8e6
    bandwidth: float = 0.60
    c: float = 1540.0
    fs: float = 40e6
    prf: float = 5e3
    n_virtual_sources: int = 5
    source_depth: float = -10e-3
    source_span: float = 0.8
    tx_cycles: float = 3.0
    tukey_alpha: float = 0.5
    directivity_deg: float = 45.0
    snr_db: float | None = None

    def __post_init__(self):
        if self.fs < 4 * self.f0:
            raise ValueError("fs must be at least 4 * f0")
        if self.n_virtual_sources < 1:
            raise ValueError("need at least one virtual source")
        if not self.source_depth < 0:
            raise ValueError("virtual sources must lie behind the array (z < 0)")

    @property
    def wavelength(self) -> float:
        return self.c / self.f0

    @property
    def element_x(self) -> np.ndarray:
        return (np.arange(self.n_elements) - (self.n_elements - 1) / 2) * self.pitch

    @property
    def aperture(self) -> float:
        return (self.n_elements - 1) * self.pitch

    @property
    def sources(self) -> np.ndarray:
        """``[n_virtual_sources, 2]`` virtual source positions ``(x, z)``."""
        half = 0.5 * self.source_span * self.aperture
        if self.n_virtual_sources == 1:
            xs = np.zeros(1)
        else:
            xs = np.linspace(-half, half, self.n_virtual_sources)
        return np.column_stack([xs, np.full_like(xs, self.source_depth)])

    @property
    def frame_dt(self) -> float:
        return self.n_virtual_sources / self.prf


@dataclass
class ChannelData:
    """Per-event, per-element RF (or analytic) samples.

    ``samples[k, e, n]`` is element ``e`` of event ``k`` at time
    ``t0 + n / fs``; ``sources[k]`` is the virtual source index of event ``k``.
    """

    samples: np.ndarray
    fs: float
    t0: float
    sources: np.ndarray
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def n_events(self) -> int:
        return self.samples.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.shape[-1]) / self.fs

    def meta(self) -> dict:
        p = self.probe
        return {
            "fs": self.fs,
            "t0": self.t0,
            "prf": p.prf,
            "f0": p.f0,
            "c": p.c,
            "pitch": p.pitch,
            "n_elements": p.n_elements,
            "bandwidth": p.bandwidth,
            "sources": self.sources.astype(float),
            "source_x": p.sources[:, 0],
            "source_z": p.sources[:, 1],
        }


# -- pulse --------------------------------------------------------------------


def raw_excitation(probe: ProbeConfig, rate: float | None = None) -> np.ndarray:
    """Tukey-tapered ``tx_cycles``-cycle sinusoid sampled at ``rate`` (default fs)."""
    rate = probe.fs if rate is None else rate
    n = int(round(probe.tx_cycles * rate / probe.f0))
    t = np.arange(n) / rate
    return tukey(n, probe.tukey_alpha) * np.sin(2 * np.pi * probe.f0 * t)


def impulse_response(probe: ProbeConfig, rate: float | None = None) -> np.ndarray:
    """Zero-phase Gaussian-envelope transducer response.

    Its amplitude spectrum falls by 6 dB at ``f0 * (1 +- bandwidth / 2)``.
    """
    rate = probe.fs if rate is None else rate
    sigma_f = 0.5 * probe.bandwidth * probe.f0 / np.sqrt(2 * np.log(2))
    sigma_t = 1 / (2 * np.pi * sigma_f)
    half = int(np.ceil(4 * sigma_t * rate))
    t = np.arange(-half, half + 1) / rate
    return np.exp(-0.5 * (t / sigma_t) ** 2) * np.cos(2 * np.pi * probe.f0 * t)


def two_way_pulse(probe: ProbeConfig, rate: float | None = None) -> tuple[np.ndarray, float]:
    """Excitation convolved with the transmit and receive responses.

    Returns the unit-peak waveform and the (fractional) sample index of its
    envelope center, which is the pulse's time reference.
    """
    raw = raw_excitation(probe, rate)
    h = impulse_response(probe, rate)
    pulse = np.convolve(np.convolve(raw, h), h)
    pulse /= np.abs(pulse).max()
    # raw envelope is symmetric about (n-1)/2; each response adds its half-length
    center = (len(raw) - 1) / 2 + (len(h) - 1)
    return pulse, center


def excitation_pulse(probe: ProbeConfig) -> np.ndarray:
    return two_way_pulse(probe)[0]


# -- events -------------------------------------------------------------------


def acquisition_window(probe: ProbeConfig, region: Region) -> tuple[float, int]:
    """``(t0, n_time)`` covering every echo from ``region`` for all sources."""
    xs = np.array([region.x0, region.x1, 0.5 * (region.x0 + region.x1)])
    zs = np.array([region.z0, region.z1])
    xx, zz = np.meshgrid(np.clip(xs, region.x0, region.x1), zs)
    pts = np.column_stack([xx.ravel(), zz.ravel()])
    pts = np.vstack([pts, [[np.clip(0.0, region.x0, region.x1), region.z0]]])
    tau = _delays(probe, pts, probe.sources)
    pulse_len = len(two_way_pulse(probe)[0]) / probe.fs
    t_min = max(tau.min() - pulse_len, 0.0)
    t_max = tau.max() + pulse_len
    # a scatterer directly below an element can be closer than any corner
    t_min = min(t_min, max(region.z0 * 2 / probe.c - pulse_len, 0.0))
    t0 = np.floor(t_min * probe.fs) / probe.fs
    n_time = int(np.ceil((t_max - t0) * probe.fs)) + 1
    return float(t0), n_time


def _delays(probe, pts, sources):
    """Min/max sanity helper: delays ``[n_src, n_pts, n_el]``."""
    ex = probe.element_x
    d_rx = np.hypot(pts[:, 0:1] - ex[None, :], pts[:, 1:2])
    out = []
    for xv, zv in sources:
        d_tx = np.hypot(pts[:, 0] - xv, pts[:, 1] - zv) - np.hypot(xv, zv)
        out.append((d_tx[:, None] + d_rx) / probe.c)
    return np.array(out)


def tx_apodization(probe: ProbeConfig, pts: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Hann transmit weight of the ray from the virtual source through each point.

    The ray is intersected with the array plane ``z = 0`` and the Hann
    window over the aperture is evaluated there (zero outside).
    """
    xv, zv = source
    x_hit = xv + (pts[:, 0] - xv) * (-zv) / (pts[:, 1] - zv)
    half = probe.aperture / 2
    u = x_hit / half
    return np.where(np.abs(u) <= 1, 0.5 * (1 + np.cos(np.pi * u)), 0.0)


def simulate_event(
    cloud: ScattererCloud,
    probe: ProbeConfig,
    source_index: int,
    t0: float | None = None,
    n_time: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """RF ``[n_elements, n_time]`` for one transmit from virtual source ``source_index``.

    Echoes are placed on a 4x oversampled time grid by two-tap linear
    splitting, filtered with the two-way pulse and decimated back to ``fs``.
    The pulse band sits far below the oversampled Nyquist, so the decimation
    needs no extra anti-alias filter. With ``probe.snr_db`` set, white
    Gaussian noise is added from ``rng``.
    """
    if len(cloud) == 0:
        raise ValueError("empty scatterer cloud")
    pos = cloud.positions
    if np.any(pos[:, 1] <= 0):
        raise ValueError("scatterer at or behind the array plane (z <= 0)")
    if t0 is None or n_time is None:
        t0, n_time = acquisition_window(probe, cloud.region)
    src = probe.sources[source_index]
    ex = probe.element_x
    rate = probe.fs * _UPSAMPLE
    pulse, center = two_way_pulse(probe, rate)
    lead = int(np.ceil(center)) + 2
    n_up = n_time * _UPSAMPLE + len(pulse) + 2 * lead

    d_tx = np.hypot(pos[:, 0] - src[0], pos[:, 1] - src[1]) - np.hypot(src[0], src[1])
    w_tx = cloud.amplitudes * tx_apodization(probe, pos, src)
    tan_dir = np.tan(np.deg2rad(probe.directivity_deg))

    train = _kernels.echo_train(
        pos[:, 0].copy(), pos[:, 1].copy(), d_tx, w_tx, ex, t0, rate, float(lead), n_up,
        probe.c, tan_dir,
    )
    n_fft = 1 << int(np.ceil(np.log2(n_up + len(pulse))))
    full = np.fft.irfft(np.fft.rfft(train, n_fft, axis=1) * np.fft.rfft(pulse, n_fft), n_fft, axis=1)
    # pulse center lands on the impulse position
    pos_up = lead + center + np.arange(n_time) * _UPSAMPLE
    i0 = np.floor(pos_up).astype(np.int64)
    f = pos_up - i0
    rf = full[:, i0] * (1 - f) + full[:, i0 + 1] * f
    if probe.snr_db is not None:
        if rng is None:
            raise ValueError("noise requested but no generator given")
        p_sig = np.mean(rf**2)
        sigma = np.sqrt(p_sig / 10 ** (probe.snr_db / 10)) if p_sig > 0 else 0.0
        rf = rf + sigma * rng.standard_normal(rf.shape)
    return rf


def simulate_sequence(
    scene: Scene,
    cloud: ScattererCloud,
    probe: ProbeConfig,
    n_frames: int,
    t_start: float = 0.0,
    rng: np.random.Generator | None = None,
    return_cloud: bool = False,
):
    """Simulate ``n_frames`` compounded frames of ``n_virtual_sources`` events each.

    Events cycle through the sources in order; the cloud is advected by
    ``1 / prf`` after every event. Event ``k`` happens at
    ``t_start + k / prf`` in scene time.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    n_src = probe.n_virtual_sources
    n_events = n_src * n_frames
    t0, n_time = acquisition_window(probe, cloud.region)
    samples = np.empty((n_events, probe.n_elements, n_time))
    dt = 1.0 / probe.prf
    for k in range(n_events):
        samples[k] = simulate_event(cloud, probe, k % n_src, t0, n_time, rng)
        if k < n_events - 1 or return_cloud:
            cloud = advect(cloud, scene, t_start + k * dt, dt)
    data = ChannelData(samples, probe.fs, t0, np.arange(n_events) % n_src, probe)
    return (data, cloud) if return_cloud else data


def channel_meta_to_probe(meta: dict) -> ProbeConfig:
    """Rebuild the probe settings stored in a channel-data sidecar."""
    xs = [float(v) for v in meta["source_x"].split(",")]
    zs = [float(v) for v in meta["source_z"].split(",")]
    pitch = float(meta["pitch"])
    n_el = int(meta["n_elements"])
    aperture = (n_el - 1) * pitch
    span = (max(xs) - min(xs)) / aperture if len(xs) > 1 else 0.8
    return replace(
        ProbeConfig(),
        n_elements=n_el,
        pitch=pitch,
        f0=float(meta["f0"]),
        c=float(meta["c"]),
        fs=float(meta["fs"]),
        prf=float(meta["prf"]),
        bandwidth=float(meta.get("bandwidth", 0.6)),
        n_virtual_sources=len(xs),
        source_depth=zs[0],
        source_span=span,
    )
