"""Encoder-decoder flow network (FlowNetSimple-style) with manual backprop.

Encoder stage: conv -> ReLU -> 2x2 max-pool.
Decoder stage: 2x nearest upsample -> 4x4 conv -> ReLU -> concat with the
pre-pool activation of the encoder stage at the same resolution.
Head: 4x4 conv to two channels, no activation.

Public functions take and return channels-first arrays ``[N, C, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class EncoderStage:
    kernel: int
    channels: int


@dataclass(frozen=True)
class DecoderStage:
    channels: int
    skip: int | None  # encoder stage whose activation is concatenated
    kernel: int = 4


@dataclass(frozen=True)
class NetSpec:
    encoder: tuple[EncoderStage, ...] = (
        EncoderStage(5, 16),
        EncoderStage(4, 32),
        EncoderStage(4, 64),
    )
    decoder: tuple[DecoderStage, ...] = (
        DecoderStage(32, 2),
        DecoderStage(16, 1),
        DecoderStage(8, 0),
    )
    head_kernel: int = 4
    in_channels: int = 4
    out_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(self.encoder))
        object.__setattr__(self, "decoder", tuple(self.decoder))
        self.validate()

    @classmethod
    def build(cls, enc_channels=(16, 32, 64), dec_channels=(32, 16, 8), skips=True):
        enc = tuple(EncoderStage(5 if i == 0 else 4, c) for i, c in enumerate(enc_channels))
        n = len(enc)
        dec = tuple(
            DecoderStage(c, (n - 1 - j) if skips else None) for j, c in enumerate(dec_channels)
        )
        return cls(enc, dec)

    def validate(self):
        if not self.encoder:
            raise ValueError("need at least one encoder stage")
        if self.encoder[0].kernel != 5:
            raise ValueError("first convolution must use a 5x5 kernel")
        if any(s.kernel != 4 for s in self.encoder[1:]) or any(
            s.kernel != 4 for s in self.decoder
        ) or self.head_kernel != 4:
            raise ValueError("all convolutions after the first must use 4x4 kernels")
        if len(self.decoder) != len(self.encoder):
            raise ValueError("every pooling stage needs a matching upsampling stage")
        n = len(self.encoder)
        for j, d in enumerate(self.decoder):
            if d.skip is not None and d.skip != n - 1 - j:
                raise ValueError(
                    f"decoder stage {j} works at the resolution of encoder stage {n - 1 - j}, "
                    f"cannot concatenate stage {d.skip}"
                )

    @property
    def min_size(self) -> int:
        return 2 ** len(self.encoder)

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c = self.in_channels
        enc_c = []
        for i, s in enumerate(self.encoder):
            shapes[f"enc{i}.w"] = (s.channels, c, s.kernel, s.kernel)
            shapes[f"enc{i}.b"] = (s.channels,)
            c = s.channels
            enc_c.append(c)
        for j, d in enumerate(self.decoder):
            shapes[f"dec{j}.w"] = (d.channels, c, d.kernel, d.kernel)
            shapes[f"dec{j}.b"] = (d.channels,)
            c = d.channels + (enc_c[d.skip] if d.skip is not None else 0)
        k = self.head_kernel
        shapes["head.w"] = (self.out_channels, c, k, k)
        shapes["head.b"] = (self.out_channels,)
        return shapes


def init_params(spec: NetSpec, seed: int = 0, dtype=np.float32) -> Params:
    """He-normal weights, zero biases; layer order fixes the draw order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def check_params(spec: NetSpec, params: Params) -> None:
    for name, shape in spec.layer_shapes().items():
        if name not in params:
            raise ValueError(f"missing parameter {name}")
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")


@dataclass
class _Cache:
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    pools: dict = field(default_factory=dict)


def _forward(spec: NetSpec, params: Params, x: np.ndarray, cache: _Cache | None):
    """Channels-last forward pass; fills ``cache`` for backprop."""
    skips = []
    h = x
    for i, _ in enumerate(spec.encoder):
        name = f"enc{i}"
        if cache is not None:
            cache.inputs[name] = h
        a = L.relu_forward(L.conv_forward(h, params[name + ".w"], params[name + ".b"]))
        if cache is not None:
            cache.outputs[name] = a
        skips.append(a)
        h, idx = L.maxpool_forward(a)
        if cache is not None:
            cache.pools[name] = idx
    for j, d in enumerate(spec.decoder):
        name = f"dec{j}"
        u = L.upsample_forward(h)
        if cache is not None:
            cache.inputs[name] = u
        a = L.relu_forward(L.conv_forward(u, params[name + ".w"], params[name + ".b"]))
        if cache is not None:
            cache.outputs[name] = a
        h = a if d.skip is None else np.concatenate([a, skips[d.skip]], axis=-1)
    if cache is not None:
        cache.inputs["head"] = h
    return L.conv_forward(h, params["head.w"], params["head.b"])


def _check_input(spec, x):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"expected input [N, {spec.in_channels}, H, W], got {x.shape}")
    if x.shape[2] % spec.min_size or x.shape[3] % spec.min_size:
        raise ValueError(f"spatial dims must be multiples of {spec.min_size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")


def forward(spec: NetSpec, params: Params, x) -> np.ndarray:
    """``[N, in, H, W]`` -> ``[N, 2, H, W]``."""
    x = np.asarray(x)
    check_params(spec, params)
    _check_input(spec, x)
    dtype = params["head.w"].dtype
    out = _forward(spec, params, np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype), None)
    return out.transpose(0, 3, 1, 2)


def _backward(spec, params, cache: _Cache, dout):
    grads = {}
    n_enc = len(spec.encoder)
    dskip = [None] * n_enc
    dh, grads["head.w"], grads["head.b"] = L.conv_backward(dout, cache.inputs["head"], params["head.w"])
    for j in reversed(range(len(spec.decoder))):
        d = spec.decoder[j]
        name = f"dec{j}"
        if d.skip is not None:
            da, ds = dh[..., : d.channels], dh[..., d.channels :]
            dskip[d.skip] = ds
        else:
            da = dh
        dz = L.relu_backward(da, cache.outputs[name])
        du, grads[name + ".w"], grads[name + ".b"] = L.conv_backward(
            dz, cache.inputs[name], params[name + ".w"]
        )
        dh = L.upsample_backward(du)
    for i in reversed(range(n_enc)):
        name = f"enc{i}"
        da = L.maxpool_backward(dh, cache.pools[name])
        if dskip[i] is not None:
            da = da + dskip[i]
        dz = L.relu_backward(da, cache.outputs[name])
        dh, grads[name + ".w"], grads[name + ".b"] = L.conv_backward(
            dz, cache.inputs[name], params[name + ".w"]
        )
    return grads


def backward(spec: NetSpec, params: Params, batch, targets, mask=None, eps: float = 1e-8):
    """Loss and parameter gradients for a batch.

    ``batch`` is ``[N, in, H, W]``, ``targets`` ``[N, 2, H, W]`` and the
    optional ``mask`` ``[N, H, W]``. The loss is the mean smoothed endpoint
    error ``sqrt(|pred - target|^2 + eps^2)`` over (masked) pixels.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``params``.
    """
    batch = np.asarray(batch)
    check_params(spec, params)
    _check_input(spec, batch)
    dtype = params["head.w"].dtype
    x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=dtype)
    t = np.ascontiguousarray(np.asarray(targets).transpose(0, 2, 3, 1), dtype=dtype)
    cache = _Cache()
    pred = _forward(spec, params, x, cache)
    loss, dpred = L.epe_loss(pred, t, mask, eps)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    grads = _backward(spec, params, cache, dpred)
    return loss, grads


def loss_value(spec, params, batch, targets, mask=None, eps=1e-8) -> float:
    pred = forward(spec, params, batch).transpose(0, 2, 3, 1)
    t = np.asarray(targets).transpose(0, 2, 3, 1).astype(pred.dtype)
    return L.epe_loss(pred, t, mask, eps)[0]
