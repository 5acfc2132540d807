"""Training, inference and parameter serialization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import dataio
from ..echopiv import VelocityEstimate
from ..metrics import epe
from .data import feather_weights, prepare_input, tile_starts
from .net import NetSpec, Params, backward, check_params, forward, init_params

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and batching settings.

    ``crop`` trains on random ``crop x crop`` windows of each patch (one per
    sample per step); the network is fully convolutional, so inference still
    runs on whole patches. ``flip`` mirrors samples laterally and ``swap``
    exchanges the two frames, each with probability 1/2, adjusting the
    target to match. ``schedule="cosine"`` anneals the learning rate to
    ``lr_floor`` times its initial value over the whole run.
    """

    learning_rate: float = 1e-3
    momentum: float = 0.9  # sgd momentum, adam beta1
    batch_size: int = 8
    epochs: int = 360
    seed: int = 0
    eps: float = 1e-8
    use_mask: bool = True
    clip_norm: float | None = None
    divergence_loss: float = 1e6
    optimizer: str = "adam"  # or "sgd"
    beta2: float = 0.999
    crop: int | None = 32
    flip: bool = True
    swap: bool = True
    schedule: str = "cosine"  # or "constant"
    lr_floor: float = 0.05
    val_every: int = 1

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.crop is not None and self.crop < 1:
            raise ValueError("crop must be positive")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")


@dataclass
class TrainResult:
    params: Params
    losses: list[float] = field(default_factory=list)
    val_epe: list[float] = field(default_factory=list)
    best_epoch: int = -1


def _global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


def sgd_step(params, grads, velocity, lr, momentum, clip_norm=None):
    scale = 1.0
    if clip_norm is not None:
        norm = _global_norm(grads)
        if norm > clip_norm:
            scale = clip_norm / norm
    for k in params:
        v = velocity[k]
        v *= momentum
        v -= (lr * scale) * grads[k].astype(v.dtype, copy=False)
        params[k] += v


def adam_step(params, grads, state, lr, beta1, beta2, step, clip_norm=None, eps=1e-8):
    """Adam update; ``state`` maps names to ``(m, v)`` moment buffers."""
    scale = 1.0
    if clip_norm is not None:
        norm = _global_norm(grads)
        if norm > clip_norm:
            scale = clip_norm / norm
    c1 = 1 - beta1**step
    c2 = 1 - beta2**step
    for k in params:
        m, v = state[k]
        g = grads[k].astype(m.dtype, copy=False) * scale
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        params[k] -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


def lr_at(config: TrainConfig, step: int, total: int) -> float:
    """Learning rate for 1-based ``step`` of ``total``."""
    if config.schedule == "constant" or total <= 1:
        return config.learning_rate
    frac = 0.5 * (1 + np.cos(np.pi * (step - 1) / (total - 1)))
    return config.learning_rate * (config.lr_floor + (1 - config.lr_floor) * frac)


def make_batch(inputs, targets, masks, idx, config: TrainConfig, rng):
    """Gather (and randomly crop, flip, swap) the samples ``idx``.

    A crop whose mask is empty falls back to an all-ones mask, so the
    sample still contributes an unmasked loss.
    """
    x, t = inputs[idx], targets[idx]
    m = None if masks is None else masks[idx]
    h, w = x.shape[2:]
    c = config.crop
    if c is not None and (c < h or c < w):
        ch, cw = min(c, h), min(c, w)
        r = rng.integers(0, h - ch + 1, len(idx))
        q = rng.integers(0, w - cw + 1, len(idx))
        x = np.stack([x[i, :, a : a + ch, b : b + cw] for i, (a, b) in enumerate(zip(r, q))])
        t = np.stack([t[i, :, a : a + ch, b : b + cw] for i, (a, b) in enumerate(zip(r, q))])
        if m is not None:
            m = np.stack([m[i, a : a + ch, b : b + cw] for i, (a, b) in enumerate(zip(r, q))])
    else:
        x, t = x.copy(), t.copy()
        m = None if m is None else m.copy()
    if config.flip:
        sel = rng.random(len(idx)) < 0.5
        x[sel] = x[sel][..., ::-1]
        t[sel] = t[sel][..., ::-1]
        t[sel, 1] *= -1  # lateral component changes sign
        if m is not None:
            m[sel] = m[sel][..., ::-1]
    if config.swap:
        sel = rng.random(len(idx)) < 0.5
        x[sel] = x[sel][:, [2, 3, 0, 1]]
        t[sel] *= -1
    if m is not None:
        m[m.reshape(len(m), -1).sum(axis=1) == 0] = 1
    return x, t, m


def predict(spec, params, inputs, batch_size=8) -> np.ndarray:
    out = [forward(spec, params, inputs[i : i + batch_size]) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out)


def median_epe(spec, params, inputs, targets, masks=None, batch_size=8) -> float:
    pred = predict(spec, params, inputs, batch_size)
    vals = [
        epe(t, p, None if masks is None else masks[i])
        for i, (t, p) in enumerate(zip(targets, pred))
    ]
    return float(np.median(vals))


def train(
    spec: NetSpec,
    inputs: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig = TrainConfig(),
    masks: np.ndarray | None = None,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
    params: Params | None = None,
    dtype=np.float32,
) -> TrainResult:
    """Minibatch Adam (or SGD with momentum) on the smoothed endpoint-error loss.

    Batches are drawn from a permutation seeded by ``config.seed``; crops,
    flips and swaps use a second generator from the same seed. When a
    validation set is given it is scored every ``val_every`` epochs and
    after the last one, and the best-scoring parameters are returned.
    Otherwise the final parameters are returned.
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("empty training set")
    if config.crop is not None and config.crop < min(inputs.shape[2:]) and config.crop % spec.min_size:
        raise ValueError(f"crop {config.crop} is not a multiple of {spec.min_size}")
    rng = np.random.default_rng(config.seed)
    aug_rng = np.random.default_rng([config.seed, 1])
    total_steps = config.epochs * -(-n // config.batch_size)
    params = init_params(spec, config.seed, dtype) if params is None else {
        k: v.astype(dtype, copy=True) for k, v in params.items()
    }
    check_params(spec, params)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}
    step = 0
    result = TrainResult(params={k: v.copy() for k, v in params.items()})
    best = np.inf
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            xb, tb, m = make_batch(inputs, targets, masks if config.use_mask else None, idx,
                                   config, aug_rng)
            loss, grads = backward(spec, params, xb, tb, m, config.eps)
            if not np.isfinite(loss) or loss > config.divergence_loss:
                raise TrainingDiverged(f"loss {loss} at epoch {epoch}, batch starting {start}")
            step += 1
            lr = lr_at(config, step, total_steps)
            if config.optimizer == "adam":
                adam_step(params, grads, moments, lr, config.momentum, config.beta2, step,
                          config.clip_norm)
            else:
                sgd_step(params, grads, velocity, lr, config.momentum, config.clip_norm)
            total += loss * len(idx)
        result.losses.append(total / n)
        scored = (epoch + 1) % config.val_every == 0 or epoch == config.epochs - 1
        if validation is not None and scored:
            score = median_epe(spec, params, *validation)
            result.val_epe.append(score)
            if score < best:
                best = score
                result.best_epoch = epoch
                result.params = {k: v.copy() for k, v in params.items()}
            log.info("epoch %d loss %.4f val median EPE %.2f%%", epoch, result.losses[-1], score)
        elif validation is None:
            result.best_epoch = epoch
            result.params = {k: v.copy() for k, v in params.items()}
            log.info("epoch %d loss %.4f", epoch, result.losses[-1])
    return result


# -- inference ----------------------------------------------------------------


def infer(spec: NetSpec, params: Params, frame_a, frame_b, pitch: float = 5e-5,
          frame_dt: float = 1e-3, patch: int = 128, overlap: int = 32) -> VelocityEstimate:
    """Velocity field for one frame pair.

    Images no larger than ``patch`` go through the network whole. Larger images are covered by ``patch``-sized tiles at stride
    ``patch - overlap`` and blended with linear feathering. The network
    predicts pixels per frame, converted here to m/s.
    """
    frame_a = np.asarray(frame_a)
    frame_b = np.asarray(frame_b)
    h, w = frame_a.shape
    small = h <= patch and w <= patch
    rows = [0] if small else tile_starts(h, patch, patch - overlap)
    cols = [0] if small else tile_starts(w, patch, patch - overlap)
    if len(rows) == 1 and len(cols) == 1:
        disp = forward(spec, params, prepare_input(frame_a, frame_b)[None])[0].astype(float)
    else:
        fw = feather_weights(patch, overlap)
        wgt = np.outer(fw, fw)
        acc = np.zeros((2, h, w))
        norm = np.zeros((h, w))
        for r in rows:
            for c in cols:
                x = prepare_input(frame_a[r : r + patch, c : c + patch],
                                  frame_b[r : r + patch, c : c + patch])
                y = forward(spec, params, x[None])[0]
                acc[:, r : r + patch, c : c + patch] += wgt * y
                norm[r : r + patch, c : c + patch] += wgt
        disp = acc / norm
    v = disp * pitch / frame_dt
    return VelocityEstimate(v, np.ones((h, w), bool), "cnn", pitch, frame_dt, disp)


# -- serialization ------------------------------------------------------------


def spec_to_text(spec: NetSpec) -> str:
    enc = ",".join(f"{s.kernel}:{s.channels}" for s in spec.encoder)
    dec = ",".join(f"{d.channels}:{'-' if d.skip is None else d.skip}" for d in spec.decoder)
    return f"encoder={enc}\ndecoder={dec}\nhead_kernel={spec.head_kernel}\n"


def spec_from_text(text: str) -> NetSpec:
    from .net import DecoderStage, EncoderStage

    kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    enc = tuple(EncoderStage(*map(int, tok.split(":"))) for tok in kv["encoder"].split(","))
    dec = []
    for tok in kv["decoder"].split(","):
        ch, skip = tok.split(":")
        dec.append(DecoderStage(int(ch), None if skip == "-" else int(skip)))
    return NetSpec(enc, tuple(dec), head_kernel=int(kv.get("head_kernel", 4)))


def save_params(directory, spec: NetSpec, params: Params) -> None:
    """One tensor file per layer plus ``index.txt`` (name, file, shape) and ``netspec.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in spec.layer_shapes():
        fname = name.replace(".", "_") + ".vfit"
        dataio.write_tensor(d / fname, params[name])
        shape = "x".join(str(s) for s in params[name].shape)
        lines.append(f"{name} {fname} {shape}")
    (d / "index.txt").write_text("\n".join(lines) + "\n")
    (d / "netspec.txt").write_text(spec_to_text(spec))


def load_params(directory) -> tuple[NetSpec, Params]:
    d = Path(directory)
    spec = spec_from_text((d / "netspec.txt").read_text())
    params = {}
    for line in (d / "index.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, fname, shape = line.split()
        arr = dataio.read_tensor(d / fname)
        if arr.shape != tuple(int(s) for s in shape.split("x")):
            raise dataio.InconsistentDimsError(f"{fname} does not match index shape {shape}")
        params[name] = arr
    check_params(spec, params)
    return spec, params
