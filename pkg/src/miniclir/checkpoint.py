"""Versioned binary checkpoints with bit-exact round trips.

Byte layout (all integers little-endian uint32, all data little-endian
IEEE floats, row-major):

    magic   8 bytes  b"MCLIRCKP"
    version u32      currently 1
    dtype   u32      bytes per float: 4 (float32) or 8 (float64)
    config  u32 length + UTF-8 JSON of the EncoderConfig
    nsect   u32      number of sections
    per section:
        name    u32 length + UTF-8 ("encoder" | "mlm" | "condenser")
        nrec    u32
        per record:
            name  u32 length + UTF-8 parameter name
            rows  u32
            cols  u32  (vectors are stored as 1 x n)
            data  rows*cols floats

Parameters are stored in their native precision (the dtype header makes
the file self-describing), grouped so the Condenser section can be
dropped at load time without touching the encoder weights.
"""

import json
import struct

import numpy as np

from . import autodiff as ad
from .encoder import EncoderConfig, param_spec
from .errors import CheckpointError
from .fileio import atomic_write

MAGIC = b"MCLIRCKP"
VERSION = 1
SECTION_OF = {
    "embed.": "encoder", "enc.": "encoder", "final_ln.": "encoder",
    "mlm.": "mlm",
    "cond.": "condenser", "cond_final_ln.": "condenser",
}
SECTION_ORDER = ("encoder", "mlm", "condenser")


def _section_for(name: str) -> str:
    for prefix, section in SECTION_OF.items():
        if name.startswith(prefix):
            return section
    raise CheckpointError(f"parameter {name!r} belongs to no checkpoint section")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(params: dict, cfg: EncoderConfig, path) -> None:
    """Write params grouped into sections; atomic replace on success."""
    dtype = next(iter(params.values())).data.dtype
    width = dtype.itemsize
    if width not in (4, 8):
        raise CheckpointError(f"unsupported parameter dtype {dtype}")
    le = f"<f{width}"
    sections = {name: [] for name in SECTION_ORDER}
    for name in sorted(params):
        sections[_section_for(name)].append(params[name])
    present = [s for s in SECTION_ORDER if sections[s]]

    with atomic_write(path, mode="wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, width))
        fh.write(_pack_str(cfg.to_json()))
        fh.write(struct.pack("<I", len(present)))
        for section in present:
            fh.write(_pack_str(section))
            fh.write(struct.pack("<I", len(sections[section])))
            for p in sections[section]:
                data = p.data
                rows, cols = (1, data.shape[0]) if data.ndim == 1 else data.shape
                fh.write(_pack_str(p.name))
                fh.write(struct.pack("<II", rows, cols))
                fh.write(np.ascontiguousarray(data, dtype=le).tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint (wanted {n} bytes at offset {self.off})")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path, include_condenser: bool = True):
    """Read (params, config) back; set include_condenser=False to drop the head.

    Every parameter named by the stored config must be present (except the
    Condenser section when skipped); shapes are validated against the
    config so a corrupt record cannot masquerade as a model.
    """
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    width = reader.u32()
    if width not in (4, 8):
        raise CheckpointError(f"{path}: unsupported float width {width}")
    le = f"<f{width}"
    try:
        cfg = EncoderConfig.from_json(reader.string())
    except (json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed config blob: {exc}") from exc

    expected = {name: shape for name, shape, _ in param_spec(cfg)}
    params = {}
    for _ in range(reader.u32()):
        section = reader.string()
        if section not in SECTION_ORDER:
            raise CheckpointError(f"{path}: unknown section {section!r}")
        for _ in range(reader.u32()):
            name = reader.string()
            rows, cols = reader.u32(), reader.u32()
            raw = reader.take(rows * cols * width)
            if name not in expected:
                raise CheckpointError(f"{path}: unexpected parameter {name!r}")
            shape = expected[name]
            if rows * cols != int(np.prod(shape)):
                raise CheckpointError(
                    f"{path}: parameter {name!r} holds {rows}x{cols} values, config wants {shape}")
            if section == "condenser" and not include_condenser:
                continue
            data = np.frombuffer(raw, dtype=le).reshape(shape).copy()
            params[name] = ad.Parameter(name, data)
    if reader.off != len(reader.blob):
        raise CheckpointError(f"{path}: {len(reader.blob) - reader.off} trailing bytes after payload")

    missing = [
        name for name in expected
        if name not in params and not (not include_condenser and _section_for(name) == "condenser")
    ]
    if missing:
        raise CheckpointError(f"{path}: missing parameters: {', '.join(sorted(missing)[:5])}")
    return params, cfg
