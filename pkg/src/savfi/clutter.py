"""SVD clutter filtering of frame stacks (Casorati matrix)."""

from __future__ import annotations

import numpy as np


def casorati(stack) -> np.ndarray:
    """``[F, H, W]`` stack to the ``(H*W, F)`` space-by-slow-time matrix."""
    stack = np.asarray(stack)
    if stack.ndim != 3 or stack.shape[0] < 2:
        raise ValueError("need a [n_frames >= 2, H, W] stack")
    return stack.reshape(stack.shape[0], -1).T


def singular_system(mat) -> tuple[np.ndarray, np.ndarray]:
    """Singular values and right singular vectors of a tall matrix.

    Uses the eigen-decomposition of the small ``F x F`` Gram matrix; values
    are sorted in decreasing order.
    """
    gram = mat.conj().T @ mat
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0, None)
    return np.sqrt(evals), evecs[:, order]


def svd_filter(stack, low_cut: int = 1, high_cut: int | None = None) -> np.ndarray:
    """Keep singular components ``low_cut <= k < high_cut`` of a frame stack.

    The first ``low_cut`` components (tissue) and those from ``high_cut`` on
    (noise) are removed. Output has the input's shape and dtype kind.
    """
    stack = np.asarray(stack)
    n = stack.shape[0]
    high_cut = n if high_cut is None else high_cut
    if not (0 <= low_cut < high_cut <= n):
        raise ValueError(f"invalid cut range [{low_cut}, {high_cut}) for {n} frames")
    mat = casorati(stack)
    _, v = singular_system(mat)
    keep = v[:, low_cut:high_cut]
    filtered = mat @ keep @ keep.conj().T
    out = filtered.T.reshape(stack.shape)
    if not np.iscomplexobj(stack):
        out = out.real
    return out
