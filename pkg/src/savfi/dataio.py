"""Binary tensor files, sidecar headers and dataset manifests.

Tensor file layout (all little-endian)::

    offset  size        field
    0       4           magic  b"VFIT"
    4       1           version (1)
    5       1           dtype code (0 float32, 1 float64, 2 complex64 as
                        interleaved float32 re/im pairs)
    6       1           ndims (>= 1)
    7       8 * ndims   dims, uint64
    ...                 payload, row-major

Manifests are line-oriented text::

    pitch_m=5e-05
    frame_dt_s=0.001
    input=a.vfit truth=a_gt.vfit mask=- tag=straight90 seed=7
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VFIT"
VERSION = 1

_CODE_TO_DTYPE = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<c8"),
}
_DTYPE_TO_CODE = {dt.newbyteorder("="): code for code, dt in _CODE_TO_DTYPE.items()}


class TensorFormatError(ValueError):
    """Base class for malformed tensor files."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class ManifestError(ValueError):
    """Raised for unreadable or inconsistent dataset manifests."""


class MissingFileError(ManifestError):
    def __init__(self, path):
        super().__init__(f"missing file: {path}")
        self.path = str(path)


class InconsistentDimsError(ManifestError):
    pass


def _dtype_code(dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("=")
    try:
        return _DTYPE_TO_CODE[dt]
    except KeyError:
        raise UnsupportedDtypeError(f"unsupported dtype {np.dtype(dtype)}") from None


def encode_tensor(tensor) -> bytes:
    """Serialize an array to the tensor file byte layout."""
    arr = np.asarray(tensor)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    code = _dtype_code(arr.dtype)
    if any(d == 0 for d in arr.shape):
        raise ValueError(f"zero-sized dimension in shape {arr.shape}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes()
    return header + payload


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse tensor file bytes back into an array (native byte order)."""
    if len(data) < 7 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    version, code, ndims = struct.unpack_from("<BBB", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise UnsupportedDtypeError(f"unsupported dtype code {code}")
    if ndims < 1:
        raise TensorFormatError("ndims must be >= 1")
    off = 7 + 8 * ndims
    if len(data) < off:
        raise TruncatedPayloadError("truncated header")
    dims = struct.unpack_from(f"<{ndims}Q", data, 7)
    dt = _CODE_TO_DTYPE[code]
    nbytes = int(np.prod(dims, dtype=np.uint64)) * dt.itemsize
    if len(data) - off < nbytes:
        raise TruncatedPayloadError(
            f"payload has {len(data) - off} bytes, expected {nbytes}"
        )
    if len(data) - off > nbytes:
        raise TensorFormatError("trailing bytes after payload")
    arr = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=off)
    return arr.reshape(dims).astype(dt.newbyteorder("="))


def write_tensor(path, tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def tensor_dims(path) -> tuple[int, ...]:
    """Read only the header of a tensor file and return its dims."""
    with open(path, "rb") as fh:
        head = fh.read(7)
        if len(head) < 7 or head[:4] != MAGIC:
            raise BadMagicError(f"bad magic in {path}")
        ndims = head[6]
        raw = fh.read(8 * ndims)
    if len(raw) < 8 * ndims:
        raise TruncatedPayloadError(f"truncated header in {path}")
    return tuple(struct.unpack(f"<{ndims}Q", raw))


# -- sidecar headers ----------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta")


def write_sidecar(path, meta: dict) -> None:
    """Write ``key=value`` metadata next to a tensor file.

    Floats are written with ``repr`` so they read back bit-exactly.
    """
    lines = []
    for key in sorted(meta):
        value = meta[key]
        if isinstance(value, (list, tuple, np.ndarray)):
            value = ",".join(repr(float(v)) for v in np.ravel(value))
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    sidecar_path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> dict[str, str]:
    meta = {}
    p = sidecar_path(path)
    if not p.exists():
        raise MissingFileError(p)
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


# -- manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    input: Path
    truth: Path
    mask: Path | None
    tag: str
    seed: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    pitch_m: float = 5e-5
    frame_dt_s: float = 1e-3

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _check_consistent(entry: ManifestEntry) -> None:
    d_in = tensor_dims(entry.input)
    d_gt = tensor_dims(entry.truth)
    # input [F, H, W] complex frames, truth [F, 2, H, W]
    if len(d_gt) < 3 or d_gt[-3] != 2 or d_in[-2:] != d_gt[-2:]:
        raise InconsistentDimsError(
            f"{entry.input} dims {d_in} do not match truth {entry.truth} dims {d_gt}"
        )
    if len(d_in) == 3 and len(d_gt) == 4 and d_in[0] != d_gt[0]:
        raise InconsistentDimsError(
            f"frame count differs: {entry.input} {d_in} vs {entry.truth} {d_gt}"
        )
    if entry.mask is not None and tensor_dims(entry.mask)[-2:] != d_in[-2:]:
        raise InconsistentDimsError(f"mask {entry.mask} does not match {entry.input}")


def parse_manifest(text: str, base=".", validate: bool = True) -> DatasetManifest:
    base = Path(base)
    man = DatasetManifest()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = dict(tok.partition("=")[::2] for tok in line.split())
        try:
            if "pitch_m" in fields and len(fields) == 1:
                man.pitch_m = float(fields["pitch_m"])
                continue
            if "frame_dt_s" in fields and len(fields) == 1:
                man.frame_dt_s = float(fields["frame_dt_s"])
                continue
            mask = fields["mask"]
            entry = ManifestEntry(
                input=_resolve(base, fields["input"]),
                truth=_resolve(base, fields["truth"]),
                mask=None if mask == "-" else _resolve(base, mask),
                tag=fields["tag"],
                seed=int(fields["seed"]),
            )
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"line {lineno}: cannot parse {line!r} ({exc})") from None
        man.entries.append(entry)
    if not man.frame_dt_s > 0:
        raise ManifestError(f"frame_dt_s must be > 0, got {man.frame_dt_s}")
    if not man.pitch_m > 0:
        raise ManifestError(f"pitch_m must be > 0, got {man.pitch_m}")
    if validate:
        for entry in man.entries:
            for p in (entry.input, entry.truth, entry.mask):
                if p is not None and not p.exists():
                    raise MissingFileError(p)
            _check_consistent(entry)
    return man


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    """Read and validate a manifest; relative paths resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path)
    return parse_manifest(path.read_text(), base=path.parent, validate=validate)


def format_manifest(manifest: DatasetManifest, base=None) -> str:
    def rel(p):
        if p is None:
            return "-"
        if base is not None:
            try:
                return os.path.relpath(p, base)
            except ValueError:
                pass
        return str(p)

    lines = [f"pitch_m={manifest.pitch_m!r}", f"frame_dt_s={manifest.frame_dt_s!r}"]
    for e in manifest.entries:
        lines.append(
            f"input={rel(e.input)} truth={rel(e.truth)} mask={rel(e.mask)} "
            f"tag={e.tag} seed={e.seed}"
        )
    return "\n".join(lines) + "\n"


def save_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    path.write_text(format_manifest(manifest, base=path.parent))
