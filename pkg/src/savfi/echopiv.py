"""Iterative multi-pass cross-correlation velocimetry on speckle images.

Each pass tiles the image with square interrogation windows (50 % overlap)
and measures the residual displacement left by the previous pass's
prediction from the peak of an FFT-based normalized cross-covariance. The
prediction is applied either by deforming both frames by half of it in
opposite directions (sub-pixel, the default) or by offsetting the windows
by its rounded value. Vectors are validated with the
normalized median test, outliers replaced by their neighbours' median, and
the field interpolated onto the next, finer tiling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import map_coordinates


@dataclass(frozen=True)
class PivConfig:
    window: int = 32
    iterations: int = 3
    overlap: float = 0.5
    median_threshold: float = 2.0
    median_eps: float = 0.1
    subpixel: str = "gaussian"
    on_bmode: bool = False
    dynamic_range: float = 60.0
    deform: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for w in self.window_sizes:
            if w < 4 or w % 2:
                raise ValueError(f"window sizes must be even and >= 4, got {w}")

    @property
    def window_sizes(self) -> list[int]:
        return [self.window >> k for k in range(self.iterations)]


@dataclass
class VelocityEstimate:
    v: np.ndarray  # [2, H, W] m/s, (axial, lateral)
    valid: np.ndarray  # [H, W] bool
    source: str
    pitch: float
    frame_dt: float
    displacement: np.ndarray | None = None  # [2, H, W] px

    @property
    def shape(self):
        return self.v.shape[1:]


# -- correlation --------------------------------------------------------------


def correlate_windows(a, b):
    """Circular normalized cross-covariance of two equal windows.

    Returns ``(surface, valid)``; ``surface`` is fft-shifted so zero lag is
    at index ``(H // 2, W // 2)`` and a peak at ``(dz, dx)`` from there
    means ``b`` is ``a`` moved by ``(dz, dx)`` pixels. ``valid`` is False
    when either window has zero variance (the surface is then all zeros).
    Leading axes are treated as a batch.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("windows differ in shape")
    if a.shape[-1] % 2 or a.shape[-2] % 2:
        raise ValueError("window dims must be even")
    a0 = a - a.mean(axis=(-2, -1), keepdims=True)
    b0 = b - b.mean(axis=(-2, -1), keepdims=True)
    energy = np.sqrt(np.sum(a0**2, axis=(-2, -1)) * np.sum(b0**2, axis=(-2, -1)))
    scale = np.max(np.abs(a), axis=(-2, -1)) * np.max(np.abs(b), axis=(-2, -1))
    valid = energy > 1e-12 * np.maximum(scale, 1e-300) * a.shape[-1] * a.shape[-2]
    fa = np.fft.rfft2(a0)
    fb = np.fft.rfft2(b0)
    corr = np.fft.irfft2(np.conj(fa) * fb, s=a.shape[-2:])
    corr = np.fft.fftshift(corr, axes=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(np.asarray(valid)[..., None, None], corr / energy[..., None, None], 0.0)
    return corr, valid


def _three_point(cm, c0, cp, gaussian: bool):
    if gaussian and cm > 0 and c0 > 0 and cp > 0:
        lm, l0, lp = np.log(cm), np.log(c0), np.log(cp)
        den = 2 * lm - 4 * l0 + 2 * lp
        if den != 0:
            return (lm - lp) / den
    den = 2 * cm - 4 * c0 + 2 * cp
    return (cm - cp) / den if den != 0 else 0.0


def subpixel_peak(surface, method: str = "gaussian"):
    """Refined peak location ``(dz, dx, on_border)`` relative to zero lag.

    A peak on the surface border cannot be fitted; its integer position is
    returned with ``on_border`` set.
    """
    s = np.asarray(surface, dtype=float)
    h, w = s.shape
    i, j = np.unravel_index(np.argmax(s), s.shape)
    dz, dx = float(i - h // 2), float(j - w // 2)
    if i == 0 or j == 0 or i == h - 1 or j == w - 1:
        return dz, dx, True
    g = method == "gaussian"
    dz += _three_point(s[i - 1, j], s[i, j], s[i + 1, j], g)
    dx += _three_point(s[i, j - 1], s[i, j], s[i, j + 1], g)
    return dz, dx, False


def _subpixel_batch(surf, gaussian=True):
    """Vectorized version of ``subpixel_peak`` over a ``[n, h, w]`` batch."""
    n, h, w = surf.shape
    flat = surf.reshape(n, -1).argmax(axis=1)
    i, j = np.divmod(flat, w)
    border = (i == 0) | (j == 0) | (i == h - 1) | (j == w - 1)
    ii = np.clip(i, 1, h - 2)
    jj = np.clip(j, 1, w - 2)
    k = np.arange(n)
    c0 = surf[k, ii, jj]

    def fit(cm, cp):
        with np.errstate(divide="ignore", invalid="ignore"):
            pos = (cm > 0) & (c0 > 0) & (cp > 0)
            lm = np.log(np.where(pos, cm, 1.0))
            l0 = np.log(np.where(pos, c0, 1.0))
            lp = np.log(np.where(pos, cp, 1.0))
            dg = 2 * lm - 4 * l0 + 2 * lp
            gauss = np.where(dg != 0, (lm - lp) / np.where(dg != 0, dg, 1.0), np.nan)
            dp = 2 * cm - 4 * c0 + 2 * cp
            para = np.where(dp != 0, (cm - cp) / np.where(dp != 0, dp, 1.0), 0.0)
        use_g = pos & np.isfinite(gauss) if gaussian else np.zeros(n, bool)
        d = np.where(use_g, gauss, para)
        # a three-point fit cannot move the peak by a full sample
        return np.clip(d, -0.5, 0.5)

    ddz = fit(surf[k, ii - 1, jj], surf[k, ii + 1, jj])
    ddx = fit(surf[k, ii, jj - 1], surf[k, ii, jj + 1])
    dz = i - h // 2 + np.where(border, 0.0, ddz)
    dx = j - w // 2 + np.where(border, 0.0, ddx)
    return dz, dx, border


# -- multi-pass ---------------------------------------------------------------


def tile_starts(n: int, win: int, step: int) -> np.ndarray:
    starts = list(range(0, n - win + 1, step))
    if starts[-1] != n - win:
        starts.append(n - win)
    return np.array(starts)


def normalized_median_test(field, threshold=2.0, eps=0.1, valid=None):
    """Outlier flags for a ``[2, nz, nx]`` vector field (3x3 neighbourhood)."""
    _, nz, nx = field.shape
    valid = np.ones((nz, nx), bool) if valid is None else valid
    pad = np.pad(field, ((0, 0), (1, 1), (1, 1)), constant_values=np.nan)
    vpad = np.pad(valid, 1, constant_values=False)
    neigh = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            sl = pad[:, 1 + di : 1 + di + nz, 1 + dj : 1 + dj + nx]
            vm = vpad[1 + di : 1 + di + nz, 1 + dj : 1 + dj + nx]
            neigh.append(np.where(vm, sl, np.nan))
    neigh = np.stack(neigh, axis=1)  # [2, 8, nz, nx]
    count = np.sum(np.isfinite(neigh[0]), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(neigh, axis=1)
        resid = np.nanmedian(np.abs(neigh - med[:, None]), axis=1)
    r = np.abs(field - med) / (resid + eps)
    norm = np.sqrt(np.nansum(r**2, axis=0))
    outlier = (norm > threshold) & (count > 0)
    return outlier, med


def _interp_field(field, zc, xc, zq, xq):
    """Bilinear interpolation of ``[2, nz, nx]`` tile field to query centers."""
    zq = np.clip(zq, zc[0], zc[-1])
    xq = np.clip(xq, xc[0], xc[-1])
    zz, xx = np.meshgrid(zq, xq, indexing="ij")
    pts = np.stack([zz.ravel(), xx.ravel()], axis=-1)
    out = np.empty((2,) + zz.shape)
    for c in range(2):
        if len(zc) == 1 and len(xc) == 1:
            out[c] = field[c, 0, 0]
            continue
        zg = zc if len(zc) > 1 else np.array([zc[0], zc[0] + 1])
        xg = xc if len(xc) > 1 else np.array([xc[0], xc[0] + 1])
        f = field[c]
        if len(zc) == 1:
            f = np.vstack([f, f])
        if len(xc) == 1:
            f = np.hstack([f, f])
        out[c] = RegularGridInterpolator((zg, xg), f)(pts).reshape(zz.shape)
    return out


def _place(start, offset, win, n):
    """Window starts for ``a`` and ``b`` straddling ``start`` by ``offset``."""
    offset = int(np.clip(offset, -(n - win), n - win))
    sa = start - offset // 2
    sb = sa + offset
    lo = min(sa, sb)
    hi = max(sa, sb) + win
    if lo < 0:
        sa, sb = sa - lo, sb - lo
    elif hi > n:
        sa, sb = sa - (hi - n), sb - (hi - n)
    return sa, sb


def deform_frames(f1, f2, disp, order: int = 3):
    """Resample ``f1`` at ``p - disp/2`` and ``f2`` at ``p + disp/2`` (``disp`` is ``[2, H, W]`` px)."""
    h, w = f1.shape
    zz, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    half = 0.5 * disp
    g1 = map_coordinates(f1, [zz - half[0], xx - half[1]], order=order, mode="nearest")
    g2 = map_coordinates(f2, [zz + half[0], xx + half[1]], order=order, mode="nearest")
    return g1, g2


def piv_pass(f1, f2, win, predictor, config: PivConfig, deformed: bool = False):
    """One correlation pass. ``predictor(zc, xc)`` returns a ``[2, nz, nx]`` guess.

    With ``deformed`` the frames have already been warped by the predictor,
    so windows are taken at the same place in both and the guess is added
    back to the measured residual.
    """
    h, w = f1.shape
    step = max(1, int(round(win * (1 - config.overlap))))
    rs = tile_starts(h, win, step)
    cs = tile_starts(w, win, step)
    zc = rs + (win - 1) / 2
    xc = cs + (win - 1) / 2
    guess = predictor(zc, xc)
    off = np.zeros(guess.shape, int) if deformed else np.rint(guess).astype(int)
    nz, nx = len(rs), len(cs)
    wa = np.empty((nz, nx, win, win))
    wb = np.empty((nz, nx, win, win))
    for a, r0 in enumerate(rs):
        for b, c0 in enumerate(cs):
            ra, rb = _place(r0, off[0, a, b], win, h)
            ca, cb = _place(c0, off[1, a, b], win, w)
            off[0, a, b] = rb - ra
            off[1, a, b] = cb - ca
            wa[a, b] = f1[ra : ra + win, ca : ca + win]
            wb[a, b] = f2[rb : rb + win, cb : cb + win]
    surf, valid = correlate_windows(wa.reshape(-1, win, win), wb.reshape(-1, win, win))
    dz, dx, _ = _subpixel_batch(surf, config.subpixel == "gaussian")
    field = np.stack([dz.reshape(nz, nx), dx.reshape(nz, nx)])
    field = field + (guess if deformed else off)
    valid = valid.reshape(nz, nx)
    field[:, ~valid] = np.nan
    outlier, med = normalized_median_test(
        np.where(valid, field, 0.0), config.median_threshold, config.median_eps, valid
    )
    bad = outlier | ~valid
    if bad.any():
        fill = np.where(np.isfinite(med), med, np.nan)
        if np.any(~np.isfinite(fill[:, bad])):
            glob = np.nanmedian(field[:, valid], axis=1) if valid.any() else np.zeros(2)
            fill = np.where(np.isfinite(fill), fill, glob[:, None, None])
        field = np.where(bad[None], fill, field)
    return field, zc, xc, valid, outlier


def _to_envelope(frame, config: PivConfig):
    env = np.abs(np.asarray(frame))
    if config.on_bmode:
        peak = env.max()
        if peak > 0:
            env = np.maximum(20 * np.log10(np.maximum(env / peak, 1e-300)), -config.dynamic_range)
    return env


def piv_pyramid(frame1, frame2, config: PivConfig | None = None, pitch: float = 5e-5,
                frame_dt: float = 1e-3) -> VelocityEstimate:
    """Displacement and velocity from two frames (complex IQ or envelope).

    Returns a per-pixel field: tile-center vectors from the last pass are
    bilinearly interpolated to every pixel (held constant beyond the
    outermost tile centers).
    """
    config = config or PivConfig()
    f1 = _to_envelope(frame1, config)
    f2 = _to_envelope(frame2, config)
    if f1.shape != f2.shape:
        raise ValueError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
    h, w = f1.shape
    if min(h, w) < config.window:
        raise ValueError("frames smaller than the initial window")

    def predictor(zq, xq):
        return np.zeros((2, len(zq), len(xq)))

    for i, win in enumerate(config.window_sizes):
        if config.deform and i > 0:
            g1, g2 = deform_frames(f1, f2, predictor(np.arange(h, dtype=float),
                                                     np.arange(w, dtype=float)))
            field, zc, xc, valid, _ = piv_pass(g1, g2, win, predictor, config, deformed=True)
        else:
            field, zc, xc, valid, _ = piv_pass(f1, f2, win, predictor, config)
        predictor = (lambda fz, zc_, xc_: (lambda zq, xq: _interp_field(fz, zc_, xc_, zq, xq)))(
            field, zc, xc
        )
    disp = predictor(np.arange(h, dtype=float), np.arange(w, dtype=float))
    # pixel validity from the nearest final tile
    iz = np.abs(np.arange(h)[:, None] - zc[None, :]).argmin(axis=1)
    ix = np.abs(np.arange(w)[:, None] - xc[None, :]).argmin(axis=1)
    vmask = valid[np.ix_(iz, ix)] & np.all(np.isfinite(disp), axis=0)
    disp = np.where(np.isfinite(disp), disp, 0.0)
    return VelocityEstimate(disp * pitch / frame_dt, vmask, "piv", pitch, frame_dt, disp)


def fit_rotation(v, pitch, center_px, mask=None) -> float:
    """Least-squares angular velocity of ``v = omega x r`` about ``center_px``.

    ``v`` is ``[2, H, W]`` (axial, lateral) m/s; ``center_px`` is ``(row, col)``.
    """
    _, h, w = v.shape
    zz, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dz = (zz - center_px[0]) * pitch
    dx = (xx - center_px[1]) * pitch
    m = np.ones((h, w), bool) if mask is None else np.asarray(mask, bool)
    num = np.sum((v[0] * dx - v[1] * dz)[m])
    den = np.sum((dx**2 + dz**2)[m])
    return float(num / den)
