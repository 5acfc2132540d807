"""Turning complex frame pairs into network inputs, with augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass
class PairSample:
    """Two consecutive complex frames and the displacement between them.

    ``target`` is ``[2, H, W]`` in pixels per frame (axial, lateral).
    ``use_mask`` marks the variant whose loss is restricted to ``mask``.
    """

    frame_a: np.ndarray
    frame_b: np.ndarray
    target: np.ndarray
    mask: np.ndarray | None = None
    tag: str = ""
    use_mask: bool = False


def _normalized(frame):
    peak = np.abs(frame).max()
    if not peak > 0:
        raise ValueError("all-zero frame cannot be normalized")
    return frame / peak


def prepare_input(frame_a, frame_b) -> np.ndarray:
    """``[4, H, W]`` float32: Re/Im of each frame, each scaled to unit peak magnitude."""
    a = _normalized(np.asarray(frame_a))
    b = _normalized(np.asarray(frame_b))
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return np.stack([a.real, a.imag, b.real, b.imag]).astype(np.float32)


def augment_pair(sample: PairSample) -> list[PairSample]:
    """Original and complex-negated copies, each also masked when a mask exists."""
    variants = [sample, replace(sample, frame_a=-sample.frame_a, frame_b=-sample.frame_b)]
    if sample.mask is not None and np.any(sample.mask):
        variants += [replace(v, use_mask=True) for v in variants]
    return variants


def pair_truth(frames, k: int) -> np.ndarray:
    """Ground truth for the pair ``(k, k+1)``: the mean of the two frames' fields."""
    frames = np.asarray(frames)
    return 0.5 * (frames[k] + frames[k + 1])


def to_arrays(samples):
    """Stack samples into ``(inputs, targets, masks)`` ready for training."""
    x = np.stack([prepare_input(s.frame_a, s.frame_b) for s in samples])
    t = np.stack([np.asarray(s.target, dtype=np.float32) for s in samples])
    m = np.stack(
        [
            np.asarray(s.mask, dtype=np.float32) if s.use_mask else np.ones(s.target.shape[1:], np.float32)
            for s in samples
        ]
    )
    return x, t, m


# -- tiling for inference on large images -------------------------------------


def tile_starts(length: int, patch: int = 128, stride: int = 96) -> list[int]:
    """Patch starts along one axis; the last patch is clipped to end at the border."""
    if length < patch:
        raise ValueError(f"image dimension {length} smaller than patch {patch}")
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def feather_weights(patch: int = 128, overlap: int = 32) -> np.ndarray:
    """1-D linear ramp over ``overlap`` pixels at both ends, 1 in the middle."""
    w = np.ones(patch)
    if overlap > 0:
        ramp = (np.arange(overlap) + 0.5) / overlap
        w[:overlap] = ramp
        w[-overlap:] = ramp[::-1]
    return w
