"""Delay-and-sum beamforming, compounding, analytic signal, baseband IQ and B-mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .ussim import ChannelData, ProbeConfig


@dataclass(frozen=True)
class ImageGrid:
    """Square-pixel grid; pixel ``(i, j)`` sits at ``(x0 + j*pitch, z0 + i*pitch)``."""

    x0: float
    z0: float
    pitch: float
    width: int
    height: int

    def __post_init__(self):
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")

    @classmethod
    def centered(cls, center=(0.0, 0.02), size=128, pitch=5e-5, height=None):
        h = size if height is None else height
        x0 = center[0] - (size - 1) / 2 * pitch
        z0 = center[1] - (h - 1) / 2 * pitch
        return cls(x0, z0, pitch, size, h)

    @property
    def x(self) -> np.ndarray:
        return self.x0 + np.arange(self.width) * self.pitch

    @property
    def z(self) -> np.ndarray:
        return self.z0 + np.arange(self.height) * self.pitch

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def meshgrid(self):
        return np.meshgrid(self.x, self.z)


@dataclass
class IqImage:
    data: np.ndarray  # complex [H, W] or stack [F, H, W]
    grid: ImageGrid
    frame_dt: float
    frame_index: int = 0


@dataclass
class DasPlan:
    """Receive-side geometry shared by every event beamformed onto one grid.

    Holds, for the elements that contribute anywhere on the grid, the
    receive path delay and Hann weight of every pixel, plus the transmit
    delay of every pixel for each virtual source.
    """

    probe: ProbeConfig
    grid: ImageGrid
    f_number: float
    elements: np.ndarray  # active element indices
    rx_delay: np.ndarray  # [n_active, H*W] s
    rx_weight: np.ndarray  # [n_active, H*W]
    tx_delay: np.ndarray  # [n_sources, H*W] s

    @classmethod
    def build(cls, probe: ProbeConfig, grid: ImageGrid, f_number: float = 1.5) -> "DasPlan":
        xx, zz = grid.meshgrid()
        xx, zz = xx.ravel(), zz.ravel()
        half_ap = np.abs(zz) / f_number / 2
        ex = probe.element_x
        u = (ex[:, None] - xx[None, :]) / half_ap[None, :]
        w = np.where(np.abs(u) <= 1, 0.5 * (1 + np.cos(np.pi * u)), 0.0)
        active = np.flatnonzero(w.any(axis=1))
        w = w[active]
        rx = np.hypot(xx[None, :] - ex[active, None], zz[None, :]) / probe.c
        src = probe.sources
        tx = (
            np.hypot(xx[None, :] - src[:, 0:1], zz[None, :] - src[:, 1:2])
            - np.hypot(src[:, 0], src[:, 1])[:, None]
        ) / probe.c
        return cls(probe, grid, f_number, active, rx, w, tx)

    def compiled(self, fs: float):
        """Delays in samples and unit phasors, cached per sampling rate."""
        cache = self.__dict__.setdefault("_compiled", {})
        if fs not in cache:
            w0 = 2 * np.pi * self.probe.f0
            rx_ph = np.exp(1j * w0 * self.rx_delay)
            tx_ph = np.exp(1j * w0 * self.tx_delay)
            cache[fs] = (
                self.rx_delay * fs,
                np.ascontiguousarray(rx_ph.real),
                np.ascontiguousarray(rx_ph.imag),
                self.tx_delay * fs,
                np.ascontiguousarray(tx_ph.real),
                np.ascontiguousarray(tx_ph.imag),
            )
        return cache[fs]


def das_event(
    channel: ChannelData,
    event: int,
    grid: ImageGrid,
    f_number: float = 1.5,
    plan: DasPlan | None = None,
) -> np.ndarray:
    """Beamform one transmit event onto ``grid``.

    Real channel data gives a real RF image. Complex (analytic) channel data
    is interpolated at baseband and re-modulated, which gives the complex
    image the real path would produce followed by an analytic-signal step,
    without aliasing the carrier on coarse grids. Delays falling outside the
    recorded window contribute zero.
    """
    probe: ProbeConfig = channel.probe
    if plan is None or plan.grid != grid or plan.f_number != f_number or plan.probe != probe:
        plan = DasPlan.build(probe, grid, f_number)
    rx_idx, rx_re, rx_im, tx_idx, tx_re, tx_im = plan.compiled(channel.fs)
    src = int(channel.sources[event])
    data = channel.samples[event]
    offset = channel.t0 * channel.fs
    elements = plan.elements.astype(np.int64)
    if np.iscomplexobj(data):
        base = data * np.exp(-2j * np.pi * probe.f0 * channel.times)[None, :]
        re, im = _kernels.das_complex(
            np.ascontiguousarray(base.real), np.ascontiguousarray(base.imag),
            tx_idx[src], tx_re[src], tx_im[src], rx_idx, rx_re, rx_im,
            plan.rx_weight, elements, offset,
        )
        out = re + 1j * im
    else:
        out = _kernels.das_real(np.ascontiguousarray(data, dtype=float), tx_idx[src], rx_idx,
                                plan.rx_weight, elements, offset)
    return out.reshape(grid.shape)


def compound(images) -> np.ndarray:
    images = list(images)
    if not images:
        raise ValueError("nothing to compound")
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise ValueError("images differ in shape")
    out = np.zeros_like(images[0])
    for im in images:
        out = out + im
    return out


def analytic_signal(rf, axis: int = 0) -> np.ndarray:
    """FFT analytic signal along ``axis`` (image columns by default).

    Negative frequencies are zeroed and positive ones doubled; DC (and
    Nyquist for even lengths) are kept once.
    """
    rf = np.asarray(rf, dtype=float)
    n = rf.shape[axis]
    if n < 8:
        raise ValueError("need at least 8 samples along the transform axis")
    spec = np.fft.fft(rf, axis=axis)
    h = np.zeros(n)
    h[0] = 1
    if n % 2 == 0:
        h[n // 2] = 1
        h[1 : n // 2] = 2
    else:
        h[1 : (n + 1) // 2] = 2
    shape = [1] * rf.ndim
    shape[axis] = n
    return np.fft.ifft(spec * h.reshape(shape), axis=axis)


def bmode(iq, dynamic_range: float = 60.0) -> np.ndarray:
    mag = np.abs(np.asarray(iq))
    peak = mag.max()
    if peak == 0:
        return np.full(mag.shape, -float(dynamic_range))
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(mag / peak)
    return np.maximum(db, -dynamic_range)


def demodulate(iq, grid: ImageGrid, probe: ProbeConfig) -> np.ndarray:
    """Shift complex images to baseband by removing the two-way carrier phase.

    Pixel rows at depth ``z`` are multiplied by ``exp(-4j*pi*f0*z/c)``. The
    magnitude is unchanged; the fast axial phase rotation of the carrier
    (about 3.3 rad per 50 um pixel at 8 MHz) is removed.
    """
    phase = np.exp(-4j * np.pi * probe.f0 * grid.z / probe.c)
    return np.asarray(iq) * phase[:, None]


def beamform_frames(
    channel: ChannelData,
    grid: ImageGrid,
    f_number: float = 1.5,
    analytic: bool = True,
    baseband: bool = True,
) -> IqImage:
    """Compound consecutive groups of ``n_virtual_sources`` events into frames.

    With ``analytic`` the channel data is converted to analytic signals along
    time before beamforming and the output stack is complex. With
    ``baseband`` as well, the complex frames are demodulated to baseband IQ.
    """
    n_src = channel.probe.n_virtual_sources
    if channel.n_events % n_src:
        raise ValueError("event count is not a multiple of the source count")
    if analytic and not np.iscomplexobj(channel.samples):
        channel = ChannelData(
            analytic_signal(channel.samples, axis=-1),
            channel.fs,
            channel.t0,
            channel.sources,
            channel.probe,
        )
    n_frames = channel.n_events // n_src
    dtype = complex if np.iscomplexobj(channel.samples) else float
    frames = np.empty((n_frames,) + grid.shape, dtype=dtype)
    plan = DasPlan.build(channel.probe, grid, f_number)
    for f in range(n_frames):
        frames[f] = compound(
            das_event(channel, f * n_src + k, grid, f_number, plan) for k in range(n_src)
        )
    if baseband and np.iscomplexobj(frames):
        frames = demodulate(frames, grid, channel.probe)
    return IqImage(frames, grid, channel.probe.frame_dt)
