"""Flat ``key = value`` pipeline configuration and seed splitting.

Keys carry a section prefix (``probe.f0_hz = 8e6``). Lines starting with
``#`` are comments. Values are coerced to the type of the built-in default,
so unknown keys and malformed values are rejected up front.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .cnn.net import DecoderStage, EncoderStage, NetSpec
from .cnn.train import TrainConfig
from .echopiv import PivConfig
from .ussim import ProbeConfig


class ConfigError(ValueError):
    pass


def hash64(global_seed: int, stage: str) -> int:
    """Stage seed: first 8 bytes (little-endian) of BLAKE2b over ``"<seed>:<stage>"``."""
    digest = hashlib.blake2b(f"{int(global_seed)}:{stage}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class SceneConfig:
    tags: tuple[str, ...] = ("straight90", "straight105", "disk")
    depth_m: float = 0.02
    pulsatile: bool = True
    margin_m: float = 1e-3
    min_support: float = 0.25
    density_per_mm2: float | None = None  # None: phantom default


@dataclass(frozen=True)
class GridConfig:
    size: int = 128
    pitch_m: float = 5e-5
    f_number: float = 1.5


@dataclass(frozen=True)
class SvdConfig:
    low_cut: int = 1
    high_cut: int | None = None


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 42
    output_dir: str = "out"
    scene: SceneConfig = field(default_factory=SceneConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    svd: SvdConfig = field(default_factory=SvdConfig)
    piv: PivConfig = field(default_factory=PivConfig)
    net: NetSpec = field(default_factory=NetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def stage_seed(self, stage: str) -> int:
        return hash64(self.seed, stage)


_UNIT_SUFFIXES = ("_hz", "_m_s", "_m", "_s")


def _annotation(obj, name):
    return next(f.type for f in fields(obj) if f.name == name)


def _field_name(obj, key):
    names = {f.name for f in fields(obj)}
    if key in names:
        return key
    for suf in _UNIT_SUFFIXES:
        if key.endswith(suf) and key[: -len(suf)] in names:
            return key[: -len(suf)]
    raise ConfigError(f"unknown key {key!r}")


def _coerce(text: str, default, key: str, annotation: str = ""):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if text.lower() in ("none", "-", ""):
            if default is None or "None" in str(annotation):
                return None
            raise ValueError("value required")
        if isinstance(default, int) or (default is None and "int" in str(annotation)):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
        if isinstance(default, tuple):
            return tuple(t.strip() for t in text.split(",") if t.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def _parse_net(text: str, key: str):
    try:
        if key == "encoder":
            return tuple(EncoderStage(*map(int, t.split(":"))) for t in text.split(","))
        stages = []
        for t in text.split(","):
            ch, skip = t.split(":")
            stages.append(DecoderStage(int(ch), None if skip.strip() == "-" else int(skip)))
        return tuple(stages)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad net.{key}: {text!r}") from exc


def parse_lines(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(values: dict[str, str]) -> PipelineConfig:
    """Apply flat ``section.key -> text`` values over the defaults."""
    cfg = PipelineConfig()
    sections: dict[str, dict[str, str]] = {}
    top = {}
    for key, val in values.items():
        if "." in key:
            sec, sub = key.split(".", 1)
            sections.setdefault(sec, {})[sub] = val
        else:
            top[_field_name(cfg, key)] = _coerce(val, getattr(cfg, _field_name(cfg, key)), key)
    updates = dict(top)
    for sec, kv in sections.items():
        if sec not in {f.name for f in fields(cfg)} or sec in ("seed", "output_dir"):
            raise ConfigError(f"unknown section {sec!r}")
        base = getattr(cfg, sec)
        if sec == "net":
            net_kw = {}
            for k, v in kv.items():
                if k in ("encoder", "decoder"):
                    net_kw[k] = _parse_net(v, k)
                else:
                    net_kw[_field_name(base, k)] = _coerce(v, getattr(base, _field_name(base, k)), k)
            try:
                updates[sec] = replace(base, **net_kw)
            except ValueError as exc:
                raise ConfigError(f"invalid net spec: {exc}") from exc
            continue
        kw = {}
        for k, v in kv.items():
            name = _field_name(base, k)
            kw[name] = _coerce(v, getattr(base, name), f"{sec}.{k}", _annotation(base, name))
        try:
            updates[sec] = replace(base, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {sec} settings: {exc}") from exc
    return replace(cfg, **updates)


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Read ``path`` (optional) and apply ``key=value`` override strings."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_lines(text, str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return build_config(values)


def format_config(cfg: PipelineConfig) -> str:
    lines = [f"seed = {cfg.seed}", f"output_dir = {cfg.output_dir}"]
    for sec in ("scene", "probe", "grid", "svd", "piv", "train"):
        obj = getattr(cfg, sec)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{sec}.{f.name} = {'none' if v is None else v}")
    net = cfg.net
    lines.append("net.encoder = " + ",".join(f"{s.kernel}:{s.channels}" for s in net.encoder))
    lines.append(
        "net.decoder = "
        + ",".join(f"{d.channels}:{'-' if d.skip is None else d.skip}" for d in net.decoder)
    )
    return "\n".join(lines) + "\n"
